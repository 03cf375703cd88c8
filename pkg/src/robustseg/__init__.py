"""Adversarial training for semantic segmentation on synthetic scenes.

Standard adversarial training (SAT) and dynamic divide-and-conquer
adversarial training (DDC-AT), FGSM/BIM attacks, white- and black-box
evaluation, and a procedural dataset to run them on.
"""
from .attacks import AttackConfig, attack, bim, fgsm, project
from .datagen import Dataset, SceneConfig, generate
from .division import DivisionMask, MaskLabel, combine, make_mask_labels
from .errors import ConfigError, DataError, InputError
from .evaluation import EvalRow, aggregate, blackbox_sweep, detect_label_leaking, miou, whitebox_sweep
from .losses import IGNORE, LossWeights, masked_ce
from .model import SegModel, build_model, forward, input_gradient, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

"""Training procedures: plain, standard adversarial (SAT) and divide-and-conquer
adversarial training (DDC-AT) with its two ablation policies.

Adversarial methods build every batch from ``m`` clean images: the first
``m // 2`` enter clean, the rest enter as their adversarial versions, so each
source image is used exactly once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, attack
from .datagen import Dataset, batch_indices
from .division import DivisionPolicy, POLICIES, division_pass, predict_division
from .errors import ConfigError
from .losses import (LossWeights, mask_ce, mask_ce_grad, masked_ce, masked_ce_grad,
                     total_loss)
from .model import SegModel, Tape, build_model, forward

__all__ = [
    "METHODS", "TrainConfig", "LossRecord", "TrainState", "SGD", "LossWeights",
    "masked_ce", "mask_ce", "total_loss", "train", "train_no_defense", "train_sat",
    "train_ddcat", "heldout_aux_fraction",
]

log = logging.getLogger(__name__)

METHODS = ("no_defense", "sat") + POLICIES


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sat"
    arch: str = "A"
    num_classes: int = 4
    batch_size: int = 8
    max_iters: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    attack: AttackConfig = AttackConfig()
    weights: LossWeights = LossWeights()
    # all-zero mask head: tied logits give p = 0 everywhere until it learns
    zero_mask_head: bool = False
    # held-out mask-fraction probe period (DDC methods only; 0 disables)
    probe_every: int = 50
    probe_size: int = 64

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"train.method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train.batch must be an even integer >= 2")
        if self.max_iters < 0:
            raise ConfigError("train.iters must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must be in [0, 1)")

    def with_method(self, method: str) -> "TrainConfig":
        return replace(self, method=method)


@dataclass
class LossRecord:
    iteration: int
    l_n: float
    l_a: float
    l_m: float
    l_all: float
    p1_fraction: float


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; w -= lr*v``."""

    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.slots: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, names) -> None:
        for name in names:
            g = grads[name]
            v = self.slots.get(name)
            if v is None:
                v = self.slots[name] = np.zeros_like(params[name])
            v *= self.momentum
            v += g
            params[name] -= self.lr * v


@dataclass
class TrainState:
    model: SegModel
    config: TrainConfig
    iteration: int = 0
    optimizers: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    attack_calls: int = 0
    # (iteration, p=1 fraction on held-out clean images)
    mask_curve: list = field(default_factory=list)
    # per-iteration (clean source indices, adversarial source indices)
    batch_log: list = field(default_factory=list)


def _names(model: SegModel, *groups) -> list:
    out = []
    for g in groups:
        out += [k for k in model.params if k.startswith(g + ".")]
    return out


def heldout_aux_fraction(model: SegModel, ds: Dataset, n: int = 64, chunk: int = 32) -> float:
    """Share of held-out clean pixels the mask head would send to the aux head."""
    total = 0
    ones = 0
    for s in range(0, min(n, len(ds)), chunk):
        xb = ds.images[s:min(s + chunk, n)]
        p = predict_division(forward(model, xb).o_m).p
        ones += int(p.sum())
        total += p.size
    return ones / total


def _init_state(cfg: TrainConfig, data: Dataset) -> TrainState:
    cfg.validate()
    if cfg.batch_size > len(data):
        raise ConfigError("train.batch exceeds the training set size")
    model = build_model(cfg.arch, cfg.num_classes, cfg.seed)
    if cfg.zero_mask_head:
        model.params["head_mask.weight"][...] = 0
        model.params["head_mask.bias"][...] = 0
    return TrainState(model=model, config=cfg)


def _stream(cfg: TrainConfig, data: Dataset):
    return batch_indices(len(data), cfg.batch_size, [cfg.seed, 1])


def _run(cfg: TrainConfig, data: Dataset, step, val: Dataset | None, callback):
    state = _init_state(cfg, data)
    stream = _stream(cfg, data)
    probe = val is not None and cfg.method in POLICIES and cfg.probe_every > 0
    if probe:
        # iteration 0 is the freshly initialised mask head
        state.mask_curve.append((0, heldout_aux_fraction(state.model, val, cfg.probe_size)))
    while state.iteration < cfg.max_iters:
        idx = next(stream)
        rec = step(state, data.images[idx], data.labels[idx], idx)
        state.iteration += 1
        state.history.append(rec)
        if probe and state.iteration % cfg.probe_every == 0:
            frac = heldout_aux_fraction(state.model, val, cfg.probe_size)
            state.mask_curve.append((state.iteration, frac))
        if callback is not None:
            callback(state)
        if state.iteration % 100 == 0:
            log.debug("%s it=%d L_all=%.4f p1=%.4f", cfg.method, state.iteration,
                      rec.l_all, rec.p1_fraction)
    return state


def _plain_step(state: TrainState, x, y, idx):
    model = state.model
    opt = state.optimizers.setdefault("main", SGD(state.config.lr, state.config.momentum))
    tape = Tape(model, x, heads=("main",))
    loss, dl = masked_ce_grad(tape.outputs["main"], y)
    grads, _ = tape.backward({"main": dl})
    opt.step(model.params, grads, _names(model, "backbone", "head_main"))
    state.batch_log.append((idx, idx[:0]))
    return LossRecord(state.iteration, loss, 0.0, 0.0, loss, 0.0)


def _sat_step(state: TrainState, x, y, idx):
    cfg = state.config
    model = state.model
    opt = state.optimizers.setdefault("main", SGD(cfg.lr, cfg.momentum))
    half = cfg.batch_size // 2
    x_adv = attack(model, x, y, cfg.attack)
    state.attack_calls += 1
    tb = np.concatenate([x[:half], x_adv[half:]])
    state.batch_log.append((idx[:half], idx[half:]))
    tape = Tape(model, tb, heads=("main",))
    loss, dl = masked_ce_grad(tape.outputs["main"], y, np.ones(y.shape, dtype=np.uint8))
    grads, _ = tape.backward({"main": dl})
    opt.step(model.params, grads, _names(model, "backbone", "head_main"))
    return LossRecord(state.iteration, loss, 0.0, 0.0, loss, 0.0)


def _ddc_step(state: TrainState, x, y, idx):
    cfg = state.config
    w = cfg.weights
    model = state.model
    opt_branch = state.optimizers.setdefault("branches", SGD(cfg.lr, cfg.momentum))
    opt_mask = state.optimizers.setdefault("mask", SGD(cfg.lr, cfg.momentum))
    half = cfg.batch_size // 2

    rec = division_pass(model, x, y, cfg.attack, DivisionPolicy(cfg.method))
    state.attack_calls += 1
    tb = np.concatenate([x[:half], rec.x_adv[half:]])
    mb = np.concatenate([rec.m_clean.M[:half], rec.m_adv.M[half:]])
    pb = np.concatenate([rec.p_clean.p[:half], rec.p_adv.p[half:]])
    qb = 1 - pb
    state.batch_log.append((idx[:half], idx[half:]))

    # {S, f_n, f_a}
    tape = Tape(model, tb, heads=("main", "aux"))
    l_n, d_n = masked_ce_grad(tape.outputs["main"], y, qb)
    l_a, d_a = masked_ce_grad(tape.outputs["aux"], y, pb)
    grads, _ = tape.backward({"main": w.lambda_n * d_n, "aux": w.lambda_a * d_a})
    opt_branch.step(model.params, grads, _names(model, "backbone", "head_main", "head_aux"))

    # {S, f_m}, on activations recomputed after the update above
    tape = Tape(model, tb, heads=("mask",))
    l_m, d_m = mask_ce_grad(tape.outputs["mask"], mb, y)
    grads, _ = tape.backward({"mask": w.lambda_m * d_m})
    opt_mask.step(model.params, grads, _names(model, "backbone", "head_mask"))

    return LossRecord(state.iteration, l_n, l_a, l_m, total_loss(l_n, l_a, l_m, w),
                      float(pb.mean()))


def train_no_defense(cfg: TrainConfig, data: Dataset, val=None, callback=None) -> TrainState:
    if cfg.method != "no_defense":
        raise ConfigError("train_no_defense needs method='no_defense'")
    return _run(cfg, data, _plain_step, val, callback)


def train_sat(cfg: TrainConfig, data: Dataset, val=None, callback=None) -> TrainState:
    if cfg.method != "sat":
        raise ConfigError("train_sat needs method='sat'")
    return _run(cfg, data, _sat_step, val, callback)


def train_ddcat(cfg: TrainConfig, data: Dataset, val=None, callback=None) -> TrainState:
    if cfg.method not in POLICIES:
        raise ConfigError(f"train_ddcat needs method in {POLICIES}")
    return _run(cfg, data, _ddc_step, val, callback)


def train(cfg: TrainConfig, data: Dataset, val=None, callback=None) -> TrainState:
    """Dispatch on ``cfg.method``."""
    cfg.validate()
    if cfg.method == "no_defense":
        return train_no_defense(cfg, data, val, callback)
    if cfg.method == "sat":
        return train_sat(cfg, data, val, callback)
    return train_ddcat(cfg, data, val, callback)

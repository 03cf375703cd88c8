"""Experiment configuration files.

INI syntax, read with :mod:`configparser`. Every key lives in a section and
is addressed as ``section.key``; unknown sections or keys are rejected.
``train.method``, ``train.seed`` and ``model.arch`` accept comma-separated
lists and span the experiment plan (methods x archs x seeds)::

    [train]
    method = sat, ddc_at
    batch = 8
    iters = 2000
    lr = 0.05
    momentum = 0.9
    seed = 0, 1, 2
    checkpoint_every = 200

    [attack]
    family = bim
    eps = 0.03
    alpha = 0.01
    steps = 3

    [model]
    arch = A, B
    classes = 4

    [data]
    h = 32
    w = 32
    classes = 4
    train_size = 512
    val_size = 128
    seed = 0

    [eval]
    mode = both
    n_max = 7
    substitute_method = sat
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .datagen import SceneConfig
from .errors import ConfigError, DataError
from .losses import LossWeights
from .model import ARCHS
from .training import METHODS, TrainConfig

EVAL_MODES = ("whitebox", "blackbox", "both")

# section -> key -> parser
_int = int
_float = float


def _str(v):
    return v.strip()


def _ints(v):
    return [int(s) for s in _list(v)]


def _list(v):
    out = [s.strip() for s in v.split(",") if s.strip()]
    if not out:
        raise ValueError("empty list")
    return out


def _bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


SCHEMA = {
    "train": {"method": _list, "batch": _int, "iters": _int, "lr": _float,
              "momentum": _float, "seed": _ints, "checkpoint_every": _int,
              "probe_every": _int, "probe_size": _int, "lambda_n": _float,
              "lambda_a": _float, "lambda_m": _float, "zero_mask_head": _bool},
    "attack": {"family": _str, "eps": _float, "alpha": _float, "steps": _int},
    "model": {"arch": _list, "classes": _int},
    "data": {"h": _int, "w": _int, "classes": _int, "train_size": _int, "val_size": _int,
             "seed": _int, "noise_sigma": _float, "color_jitter": _float,
             "coarse_offset": _float, "fine_step": _float, "min_shapes": _int, "max_shapes": _int},
    "eval": {"mode": _str, "n_max": _int, "alpha": _float, "eps": _float,
             "substitute_method": _str, "size": _int},
}


@dataclass
class ExperimentPlan:
    methods: list
    archs: list
    seeds: list
    eval_mode: str
    train: TrainConfig
    scene: SceneConfig
    n_max: int = 7
    eval_eps: float = 0.03
    eval_alpha: float = 0.01
    eval_size: int = 0
    substitute_method: str = "sat"
    checkpoint_every: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def runs(self):
        """Every (method, arch, seed) the plan trains, in a stable order."""
        return [(m, a, s) for a in self.archs for m in self.methods for s in self.seeds]

    def train_config(self, method: str, arch: str, seed: int) -> TrainConfig:
        from dataclasses import replace

        return replace(self.train, method=method, arch=arch, seed=seed)

    def validate(self) -> None:
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"train.method: unknown method {m!r}")
        for a in self.archs:
            if a not in ARCHS:
                raise ConfigError(f"model.arch: unknown architecture {a!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval.mode must be one of {EVAL_MODES}")
        if self.eval_mode in ("blackbox", "both"):
            if set(self.archs) != set(ARCHS):
                raise ConfigError("eval.mode: blackbox evaluation needs model.arch = A, B")
            if self.substitute_method not in self.methods:
                raise ConfigError("eval.substitute_method must be one of train.method")
        if self.n_max < 1:
            raise ConfigError("eval.n_max must be >= 1")
        if self.train.num_classes != self.scene.num_classes:
            raise ConfigError("model.classes and data.classes disagree")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("train.seed has duplicates")
        self.train.validate()
        try:
            self.scene.validate()
        except DataError as e:
            raise ConfigError(f"data: {e}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: malformed config: {e}") from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            name = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {name}")
            try:
                values[name] = SCHEMA[section][key](raw)
            except ValueError as e:
                raise ConfigError(f"{source}: bad value for {name}: {e}") from None
    return values


def plan_from_values(v: dict) -> ExperimentPlan:
    def get(name, default):
        return v.get(name, default)

    try:
        attack = AttackConfig(epsilon=get("attack.eps", 0.03), alpha=get("attack.alpha", 0.01),
                              steps=get("attack.steps", 3), family=get("attack.family", "bim"))
        weights = LossWeights(get("train.lambda_n", 1.0), get("train.lambda_a", 1.0),
                              get("train.lambda_m", 1.0))
    except Exception as e:  # noqa: BLE001 - any constructor complaint is a config error
        raise ConfigError(str(e)) from None
    classes = get("model.classes", 4)
    train = TrainConfig(
        method=get("train.method", ["sat"])[0], arch=get("model.arch", ["A"])[0],
        num_classes=classes, batch_size=get("train.batch", 8),
        max_iters=get("train.iters", 2000), lr=get("train.lr", 0.05),
        momentum=get("train.momentum", 0.9), seed=get("train.seed", [0])[0],
        attack=attack, weights=weights, zero_mask_head=get("train.zero_mask_head", False),
        probe_every=get("train.probe_every", 50), probe_size=get("train.probe_size", 64),
    )
    defaults = SceneConfig()
    scene = SceneConfig(
        h=get("data.h", defaults.h), w=get("data.w", defaults.w),
        num_classes=get("data.classes", classes),
        noise_sigma=get("data.noise_sigma", defaults.noise_sigma),
        color_jitter=get("data.color_jitter", defaults.color_jitter),
        coarse_offset=get("data.coarse_offset", defaults.coarse_offset),
        fine_step=get("data.fine_step", defaults.fine_step),
        min_shapes=get("data.min_shapes", defaults.min_shapes),
        max_shapes=get("data.max_shapes", defaults.max_shapes),
        train_size=get("data.train_size", defaults.train_size),
        val_size=get("data.val_size", defaults.val_size),
        seed=get("data.seed", defaults.seed),
    )
    plan = ExperimentPlan(
        methods=get("train.method", ["sat"]), archs=get("model.arch", ["A"]),
        seeds=get("train.seed", [0]), eval_mode=get("eval.mode", "whitebox"),
        train=train, scene=scene, n_max=get("eval.n_max", 7),
        eval_eps=get("eval.eps", attack.epsilon), eval_alpha=get("eval.alpha", attack.alpha),
        eval_size=get("eval.size", 0),
        substitute_method=get("eval.substitute_method", "sat"),
        checkpoint_every=get("train.checkpoint_every", 0), raw=dict(v),
    )
    plan.validate()
    return plan


def load_plan(path) -> ExperimentPlan:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    return plan_from_values(parse_config_text(text, str(p)))

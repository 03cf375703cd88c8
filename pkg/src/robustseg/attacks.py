"""Untargeted L-infinity gradient-sign attacks against the main head.

Images live in [0, 1]. The attack loss is always the mean cross-entropy of
the main-head logits; IGNORE pixels do not contribute to it but every pixel
of the image is perturbed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import SegModel, loss_and_input_gradient

FAMILIES = ("fgsm", "bim")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.03
    alpha: float = 0.01
    steps: int = 3
    family: str = "bim"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"attack.family must be one of {FAMILIES}, got {self.family!r}")
        if self.epsilon < 0:
            raise ConfigError("attack.eps must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("attack.alpha must be > 0")
        if self.steps < 1:
            raise ConfigError("attack.steps must be >= 1")

    @property
    def n_steps(self) -> int:
        return 1 if self.family == "fgsm" else self.steps

    def to_dict(self) -> dict:
        return {"attack.family": self.family, "attack.eps": self.epsilon,
                "attack.alpha": self.alpha, "attack.steps": self.steps}


def _check(x_adv, x_clean):
    if np.shape(x_adv) != np.shape(x_clean):
        raise InputError(f"shape mismatch {np.shape(x_adv)} vs {np.shape(x_clean)}")


def project(x_adv, x_clean, epsilon: float):
    """Clamp ``x_adv`` into the epsilon ball around ``x_clean`` and into [0, 1]."""
    _check(x_adv, x_clean)
    x_clean = np.asarray(x_clean)
    lo = np.maximum(x_clean - epsilon, 0)
    hi = np.minimum(x_clean + epsilon, 1)
    return np.minimum(np.maximum(x_adv, lo), hi).astype(x_clean.dtype, copy=False)


def _signed_step(model, x, y, step):
    _, g = loss_and_input_gradient(model, x, y)
    return x + step * np.sign(g).astype(x.dtype)


def fgsm(model: SegModel, x_clean, y, epsilon: float):
    """Single gradient-sign step of size ``epsilon``, clamped to [0, 1]."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    x_clean = np.asarray(x_clean, dtype=model.dtype)
    if np.shape(y) != x_clean.shape[:-1]:
        raise InputError(f"labels {np.shape(y)} do not match image {x_clean.shape}")
    return np.clip(_signed_step(model, x_clean, y, epsilon), 0, 1)


def bim_iterates(model: SegModel, x_clean, y, epsilon: float, alpha: float, steps: int):
    """Yield the BIM iterate after each of ``steps`` steps.

    The iterate after step ``t`` is exactly ``bim`` run with ``steps=t``, so a
    sweep over the iteration count needs only one trajectory.
    """
    x_clean = np.asarray(x_clean, dtype=model.dtype)
    if np.shape(y) != x_clean.shape[:-1]:
        raise InputError(f"labels {np.shape(y)} do not match image {x_clean.shape}")
    x = x_clean
    for _ in range(steps):
        x = project(_signed_step(model, x, y, alpha), x_clean, epsilon)
        yield x


def bim(model: SegModel, x_clean, y, cfg: AttackConfig):
    if cfg.family != "bim":
        raise ConfigError("bim() needs an AttackConfig with family='bim'")
    x = None
    for x in bim_iterates(model, x_clean, y, cfg.epsilon, cfg.alpha, cfg.steps):
        pass
    return x


def attack(model: SegModel, x_clean, y, cfg: AttackConfig):
    """Dispatch on ``cfg.family``."""
    if cfg.family == "fgsm":
        return fgsm(model, x_clean, y, cfg.epsilon)
    return bim(model, x_clean, y, cfg)

"""Divide / merge machinery of divide-and-conquer adversarial training.

The mask head splits pixels between the main head (``p = 0``) and the
auxiliary head (``p = 1``). Mask labels say where each pixel *should* go: a
clean pixel whose merged prediction flips under attack is sent to the
auxiliary head; adversarial pixels go to the main head. Two ablation policies
move the flipped pixels of the adversarial image instead (``ddc_at_n``) or
as well (``ddc_at_m``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, attack
from .errors import ConfigError, InputError
from .losses import IGNORE
from .model import SegModel, argmax_labels, forward

POLICIES = ("ddc_at", "ddc_at_m", "ddc_at_n")


@dataclass(frozen=True)
class DivisionMask:
    p: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return 1 - self.p

    @property
    def aux_fraction(self) -> float:
        return float(self.p.mean())


@dataclass(frozen=True)
class MaskLabel:
    M: np.ndarray

    @property
    def one_hot(self) -> np.ndarray:
        return np.stack([1 - self.M, self.M], axis=-1)


@dataclass(frozen=True)
class DivisionPolicy:
    variant: str = "ddc_at"

    def __post_init__(self):
        if self.variant not in POLICIES:
            raise ConfigError(f"unknown division policy {self.variant!r}")


def predict_division(o_m) -> DivisionMask:
    o_m = np.asarray(o_m)
    if o_m.shape[-1] != 2:
        raise InputError("mask logits need exactly 2 channels")
    return DivisionMask(argmax_labels(o_m).astype(np.uint8))


def combine(o_n, o_a, mask: DivisionMask):
    """Merged logits ``o_a * p + o_n * (1 - p)``, selected per pixel."""
    o_n = np.asarray(o_n)
    o_a = np.asarray(o_a)
    if o_n.shape != o_a.shape or o_n.shape[:-1] != mask.p.shape:
        raise InputError("branch outputs and mask disagree in shape")
    return np.where(mask.p[..., None].astype(bool), o_a, o_n)


@dataclass
class DivisionRecord:
    """Everything one pass of mask-label generation computes."""

    x_adv: np.ndarray
    p_clean: DivisionMask
    p_adv: DivisionMask
    b_clean: np.ndarray
    b_adv: np.ndarray
    m_clean: MaskLabel
    m_adv: MaskLabel


def division_pass(model: SegModel, x_clean, y, cfg: AttackConfig,
                  policy: DivisionPolicy) -> DivisionRecord:
    out_c = forward(model, x_clean)
    p_clean = predict_division(out_c.o_m)
    b_clean = argmax_labels(combine(out_c.o_n, out_c.o_a, p_clean))

    x_adv = attack(model, x_clean, y, cfg)

    out_a = forward(model, x_adv)
    p_adv = predict_division(out_a.o_m)
    b_adv = argmax_labels(combine(out_a.o_n, out_a.o_a, p_adv))

    flipped = (b_clean != b_adv) & (np.asarray(y) != IGNORE)
    flipped = flipped.astype(np.uint8)
    zeros = np.zeros_like(flipped)
    if policy.variant == "ddc_at":
        m_clean, m_adv = flipped, zeros
    elif policy.variant == "ddc_at_m":
        m_clean, m_adv = flipped, flipped.copy()
    else:
        m_clean, m_adv = zeros, flipped
    return DivisionRecord(x_adv, p_clean, p_adv, b_clean, b_adv,
                          MaskLabel(m_clean), MaskLabel(m_adv))


def make_mask_labels(model: SegModel, x_clean, y, cfg: AttackConfig,
                     policy: DivisionPolicy = DivisionPolicy()):
    """Return ``(M_clean, M_adv, x_adv)`` for one image or a batch."""
    rec = division_pass(model, x_clean, y, cfg, policy)
    return rec.m_clean, rec.m_adv, rec.x_adv

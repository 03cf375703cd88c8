"""Pixel-wise cross-entropy losses used by training and by the attacks.

Every loss here is a mean over all non-IGNORE pixel positions of the batch.
A binary mask zeroes the contribution of masked-out pixels but does not
remove them from the denominator, so a loss computed with ``q`` plus the same
loss computed with ``p = 1 - q`` adds up to the unmasked loss.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError

IGNORE = kernels.IGNORE


class EmptyLossWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_n: float = 1.0
    lambda_a: float = 1.0
    lambda_m: float = 1.0

    def __post_init__(self):
        if min(self.lambda_n, self.lambda_a, self.lambda_m) < 0:
            raise InputError("loss weights must be non-negative")


def masked_ce_grad(logits, y, mask=None):
    """Masked mean cross-entropy and its gradient with respect to ``logits``.

    ``logits`` has shape (..., K); ``y`` and ``mask`` have the leading shape.
    Returns ``(loss, dlogits)``. With no scored pixels the loss is 0 and an
    :class:`EmptyLossWarning` is emitted.
    """
    logits = np.asarray(logits)
    y = np.asarray(y)
    if logits.shape[:-1] != y.shape:
        raise InputError(f"logits {logits.shape} do not match labels {y.shape}")
    k = logits.shape[-1]
    if mask is None:
        w = np.ones(y.size, dtype=logits.dtype)
    else:
        mask = np.asarray(mask)
        if mask.shape != y.shape:
            raise InputError(f"mask {mask.shape} does not match labels {y.shape}")
        w = mask.reshape(-1).astype(logits.dtype)
    labels = y.reshape(-1)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise InputError(f"label values must be < {k} or IGNORE")
    total, grad, count = kernels.softmax_xent(logits.reshape(-1, k), labels, w)
    if count == 0:
        warnings.warn("no scored pixels; loss defined as 0", EmptyLossWarning, stacklevel=2)
        return 0.0, np.zeros_like(logits)
    grad /= count
    return total / count, grad.reshape(logits.shape)


def masked_ce(logits, y, mask=None) -> float:
    """Mean over non-IGNORE pixels of ``mask * CE(softmax(logits), y)``."""
    return masked_ce_grad(logits, y, mask)[0]


def mask_ce_grad(o_m, m_label, y=None):
    """Two-class cross-entropy of mask logits against a binary mask label.

    Pixels that are IGNORE in the segmentation labels ``y`` (if given) are
    left out of the mean.
    """
    m_label = np.asarray(m_label)
    target = m_label.astype(np.int64)
    if y is not None:
        target = np.where(np.asarray(y) == IGNORE, IGNORE, target)
    return masked_ce_grad(o_m, target)


def mask_ce(o_m, m_label, y=None) -> float:
    return mask_ce_grad(o_m, m_label, y)[0]


def total_loss(l_n: float, l_a: float, l_m: float, w: LossWeights = LossWeights()) -> float:
    return w.lambda_n * l_n + w.lambda_a * l_a + w.lambda_m * l_m

"""Hot numeric kernels: 3x3 same-padded convolution (NHWC) and fused softmax
cross-entropy.

Two interchangeable implementations live here. The numba path does the
gather/scatter work (im2col, col2im, per-pixel softmax) in ``@njit`` loops and
hands the GEMMs to BLAS; the numpy path uses shifted-slice matmuls. Set
``ROBUSTSEG_NUMBA=0`` to force the pure-numpy fallback (it is also used when
numba cannot be imported). The flag is read once, at import.

Both paths are deterministic, but they are not bit-identical to each other:
compare runs only within one backend.
"""
from __future__ import annotations

import os

import numpy as np

IGNORE = 255

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _numba_requested() -> bool:
    flag = os.environ.get("ROBUSTSEG_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off", "")


USE_NUMBA = _HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def conv3x3_forward_np(x, w, b):
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, h, wd, w.shape[3]), dtype=x.dtype)
    out[...] = b
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + h, j:j + wd, :] @ w[i, j]
    return out


def conv3x3_backward_np(x, w, gout, need_dx=True):
    n, h, wd, c = x.shape
    o = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    g2 = gout.reshape(-1, o)
    gw = np.empty_like(w)
    for i in range(3):
        for j in range(3):
            gw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, c).T @ g2
    gb = g2.sum(axis=0)
    gx = None
    if need_dx:
        gxp = np.zeros((n, h + 2, wd + 2, c), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + wd, :] += gout @ w[i, j].T
        gx = gxp[:, 1:-1, 1:-1, :].copy()
    return gx, gw, gb


def softmax_xent_np(logits, labels, weight):
    """Return (weighted loss sum, grad of that sum, number of scored pixels).

    ``logits`` is (P, K), ``labels`` (P,) with IGNORE allowed, ``weight`` (P,).
    """
    valid = labels != IGNORE
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    prob = ez / se
    safe = np.where(valid, labels, 0).astype(np.intp)
    rows = np.arange(labels.shape[0])
    nll = np.log(se[:, 0]) - z[rows, safe]
    wv = np.where(valid, weight, 0).astype(logits.dtype)
    grad = prob * wv[:, None]
    grad[rows, safe] -= wv
    return float(np.sum(nll * wv, dtype=np.float64)), grad, int(valid.sum())


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _im2col3x3(x):
        n, h, wd, c = x.shape
        cols = np.zeros((n * h * wd, 9 * c), dtype=x.dtype)
        r = 0
        for s in range(n):
            for i in range(h):
                for j in range(wd):
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            base = (di * 3 + dj) * c
                            for k in range(c):
                                cols[r, base + k] = x[s, ii, jj, k]
                    r += 1
        return cols

    @njit(cache=True)
    def _col2im3x3(dcols, n, h, wd, c):
        gx = np.zeros((n, h, wd, c), dtype=dcols.dtype)
        r = 0
        for s in range(n):
            for i in range(h):
                for j in range(wd):
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            base = (di * 3 + dj) * c
                            for k in range(c):
                                gx[s, ii, jj, k] += dcols[r, base + k]
                    r += 1
        return gx

    @njit(cache=True)
    def _softmax_xent_nb(logits, labels, weight, ignore):
        p, k = logits.shape
        grad = np.zeros_like(logits)
        total = 0.0
        count = 0
        for r in range(p):
            lab = labels[r]
            if lab == ignore:
                continue
            count += 1
            m = logits[r, 0]
            for c in range(1, k):
                if logits[r, c] > m:
                    m = logits[r, c]
            se = 0.0
            for c in range(k):
                se += np.exp(logits[r, c] - m)
            wr = weight[r]
            total += wr * (np.log(se) - (logits[r, lab] - m))
            if wr != 0.0:
                for c in range(k):
                    grad[r, c] = wr * (np.exp(logits[r, c] - m) / se)
                grad[r, lab] -= wr
        return total, grad, count


def conv3x3_forward_nb(x, w, b):
    n, h, wd, c = x.shape
    cols = _im2col3x3(np.ascontiguousarray(x))
    out = cols @ w.reshape(9 * c, -1)
    out += b
    return out.reshape(n, h, wd, -1)


def conv3x3_backward_nb(x, w, gout, need_dx=True):
    n, h, wd, c = x.shape
    o = w.shape[3]
    cols = _im2col3x3(np.ascontiguousarray(x))
    g2 = gout.reshape(-1, o)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gx = None
    if need_dx:
        dcols = g2 @ w.reshape(9 * c, o).T
        gx = _col2im3x3(np.ascontiguousarray(dcols), n, h, wd, c)
    return gx, gw, gb


def softmax_xent_nb(logits, labels, weight):
    total, grad, count = _softmax_xent_nb(
        np.ascontiguousarray(logits),
        np.ascontiguousarray(labels).astype(np.int64),
        np.ascontiguousarray(weight, dtype=logits.dtype),
        IGNORE,
    )
    return float(total), grad, int(count)


if USE_NUMBA:
    conv3x3_forward = conv3x3_forward_nb
    conv3x3_backward = conv3x3_backward_nb
    softmax_xent = softmax_xent_nb
else:
    conv3x3_forward = conv3x3_forward_np
    conv3x3_backward = conv3x3_backward_np
    softmax_xent = softmax_xent_np

"""Three-head fully-convolutional segmentation network.

A shared backbone of 3x3 same-padded convolutions with ReLU feeds three 1x1
heads: ``main`` (K channels, the only head used at inference), ``aux``
(K channels) and ``mask`` (2 channels, decides which of main/aux handles a
pixel during divide-and-conquer training).

Arrays are NHWC. Single images (HxWxC) are accepted everywhere and returned
without the batch axis.
"""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InputError
from .losses import masked_ce_grad

HEADS = ("main", "aux", "mask")

# fixed input standardisation applied before the first convolution
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0

# backbone widths per registered architecture; input is always RGB
ARCHS = {
    "A": (16, 32, 32),
    "B": (24, 48, 48, 48),
}


@dataclass
class SegModel:
    arch_id: str
    num_classes: int
    seed: int
    params: dict = field(repr=False)

    @property
    def dtype(self):
        return self.params["head_main.weight"].dtype

    @property
    def depth(self) -> int:
        return len(ARCHS[self.arch_id])

    def head_channels(self, head: str) -> int:
        return self.params[f"head_{head}.weight"].shape[1]

    def copy(self) -> "SegModel":
        return SegModel(self.arch_id, self.num_classes, self.seed,
                        {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


@dataclass
class BranchOutputs:
    o_n: np.ndarray
    o_a: np.ndarray
    o_m: np.ndarray


def build_model(arch: str, num_classes: int, seed: int, dtype=np.float32) -> SegModel:
    """He-initialised model; parameters are a pure function of (arch, K, seed)."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHS)}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for i, cout in enumerate(ARCHS[arch]):
        std = np.sqrt(2.0 / (9 * cin))
        params[f"backbone.conv{i}.weight"] = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)
        params[f"backbone.conv{i}.bias"] = np.zeros(cout, dtype=dtype)
        cin = cout
    for head, k in zip(HEADS, (num_classes, num_classes, 2)):
        std = np.sqrt(1.0 / cin)
        params[f"head_{head}.weight"] = (rng.standard_normal((cin, k)) * std).astype(dtype)
        params[f"head_{head}.bias"] = np.zeros(k, dtype=dtype)
    return SegModel(arch, num_classes, seed, params)


def _as_batch(model: SegModel, x):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InputError(f"expected HxWx3 or NxHxWx3 input, got {x.shape}")
    return np.ascontiguousarray(x, dtype=model.dtype), single


def _backbone(model: SegModel, x):
    p = model.params
    h = (x - INPUT_MEAN) * INPUT_SCALE
    acts = [h]
    for i in range(model.depth):
        h = kernels.conv3x3_forward(h, p[f"backbone.conv{i}.weight"], p[f"backbone.conv{i}.bias"])
        np.maximum(h, 0, out=h)
        acts.append(h)
    return acts


def _head(model: SegModel, head: str, feat):
    w = model.params[f"head_{head}.weight"]
    b = model.params[f"head_{head}.bias"]
    return feat @ w + b


def forward(model: SegModel, x, mode: str = "all_branches"):
    """Run the network.

    ``mode="main_only"`` evaluates the backbone and the main head and nothing
    else, returning the main logits array. ``mode="all_branches"`` returns a
    :class:`BranchOutputs`.
    """
    xb, single = _as_batch(model, x)
    feat = _backbone(model, xb)[-1]
    sq = (lambda a: a[0]) if single else (lambda a: a)
    if mode == "main_only":
        return sq(_head(model, "main", feat))
    if mode != "all_branches":
        raise InputError(f"unknown forward mode {mode!r}")
    return BranchOutputs(*(sq(_head(model, h, feat)) for h in HEADS))


class Tape:
    """Activations kept from a forward pass for one backward pass."""

    def __init__(self, model: SegModel, x, heads=HEADS):
        xb, self.single = _as_batch(model, x)
        self.model = model
        self.acts = _backbone(model, xb)
        self.outputs = {h: _head(model, h, self.acts[-1]) for h in heads}

    def backward(self, dlogits: dict, need_input_grad: bool = False):
        """Gradients for the parameters reached from the heads in ``dlogits``.

        Returns ``(grads, dx)``; ``grads`` only holds backbone tensors and the
        heads that received an output gradient.
        """
        model = self.model
        feat = self.acts[-1]
        c = feat.shape[-1]
        f2 = feat.reshape(-1, c)
        grads = {}
        dfeat = None
        for head in HEADS:
            if head not in dlogits:
                continue
            g = np.asarray(dlogits[head], dtype=model.dtype)
            if self.single:
                g = g[None]
            g2 = g.reshape(-1, g.shape[-1])
            grads[f"head_{head}.weight"] = f2.T @ g2
            grads[f"head_{head}.bias"] = g2.sum(axis=0)
            d = (g2 @ model.params[f"head_{head}.weight"].T).reshape(feat.shape)
            dfeat = d if dfeat is None else dfeat + d
        if dfeat is None:
            raise InputError("backward needs at least one head gradient")
        g = dfeat
        for i in reversed(range(model.depth)):
            g = g * (self.acts[i + 1] > 0)
            need_dx = i > 0 or need_input_grad
            gx, gw, gb = kernels.conv3x3_backward(
                self.acts[i], model.params[f"backbone.conv{i}.weight"], g, need_dx)
            grads[f"backbone.conv{i}.weight"] = gw
            grads[f"backbone.conv{i}.bias"] = gb
            g = gx
        dx = None
        if need_input_grad:
            g = g * INPUT_SCALE
            dx = g[0] if self.single else g
        return grads, dx


def input_gradient(model: SegModel, x, y, loss_selector: str = "main_ce"):
    """Gradient w.r.t. the input of the mean cross-entropy of the main head."""
    if loss_selector != "main_ce":
        raise InputError(f"unsupported loss selector {loss_selector!r}")
    return loss_and_input_gradient(model, x, y)[1]


def loss_and_input_gradient(model: SegModel, x, y):
    tape = Tape(model, x, heads=("main",))
    yb = np.asarray(y)
    if tape.single:
        yb = yb[None]
    loss, dl = masked_ce_grad(tape.outputs["main"], yb)
    _, dx = tape.backward({"main": dl}, need_input_grad=True)
    return loss, dx


def argmax_labels(logits):
    """Per-pixel argmax over the last axis; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 2:
        raise InputError("need at least two channels")
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(model: SegModel, path) -> None:
    """Write an uncompressed ``.npz`` archive with fixed zip timestamps.

    Keys: ``meta.arch_id`` (str), ``meta.num_classes`` and ``meta.seed``
    (int64 scalars) and one entry per parameter (``backbone.*``,
    ``head_main.*``, ``head_aux.*``, ``head_mask.*``). Plain ``np.load`` reads
    it; identical models give identical bytes.
    """
    arrays = {
        "meta.arch_id": np.array(model.arch_id),
        "meta.num_classes": np.array(model.num_classes, dtype=np.int64),
        "meta.seed": np.array(model.seed, dtype=np.int64),
    }
    arrays.update(model.params)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            # np.require keeps 0-d metadata 0-d (ascontiguousarray would make it 1-d)
            np.lib.format.write_array(buf, np.require(arrays[key], requirements="C"),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_FIXED_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> SegModel:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    try:
        arch = str(arrays.pop("meta.arch_id"))
        k = int(arrays.pop("meta.num_classes"))
        seed = int(arrays.pop("meta.seed"))
    except KeyError as e:
        raise InputError(f"{path}: missing checkpoint metadata {e}") from None
    if arch not in ARCHS:
        raise ConfigError(f"{path}: unknown architecture {arch!r}")
    # keep the registration order used by build_model
    order = list(build_model(arch, k, 0).params)
    if sorted(order) != sorted(arrays):
        raise InputError(f"{path}: parameter keys do not match architecture {arch}")
    return SegModel(arch, k, seed, {name: arrays[name] for name in order})

"""Procedural segmentation scenes: coloured shapes on a coloured background.

Each class has a characteristic base colour with two parts:

* a coarse offset in the red/green plane (class 0 at the centre, the other
  classes on a circle of radius ``coarse_offset``), blurred by a per-region
  uniform jitter of +-``color_jitter`` on those two channels;
* a fine, jitter-free blue level, ``fine_step`` apart between classes.

The fine level alone separates the classes almost perfectly but sits well
inside an L-inf budget of 0.03, so a model that leans on it is easy to
attack; the coarse offset survives the attack but is ambiguous for part of
the regions. Gaussian pixel noise is added on top. Pixel values are
quantised to multiples of 1/255 so that the PNG files written by
:func:`save` reproduce the arrays exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .losses import IGNORE

MAX_ATTEMPTS = 100
SHAPES = ("rectangle", "disk", "stripe")
_SPLIT_STREAM = {"train": 0, "val": 1}
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SceneConfig:
    h: int = 32
    w: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.02
    color_jitter: float = 0.24
    coarse_offset: float = 0.3
    fine_step: float = 0.04
    min_shapes: int = 1
    max_shapes: int = 3
    train_size: int = 512
    val_size: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.h < 16 or self.w < 16:
            raise DataError("scene height and width must be >= 16")
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if min(self.noise_sigma, self.color_jitter, self.coarse_offset, self.fine_step) < 0:
            raise DataError("noise_sigma, color_jitter, coarse_offset and fine_step must be >= 0")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise DataError("need 1 <= min_shapes <= max_shapes")
        if self.train_size < 1 or self.val_size < 1:
            raise DataError("split sizes must be positive")


class Dataset:
    """Images (N, H, W, 3) float32 in [0, 1] and labels (N, H, W) uint8."""

    def __init__(self, images, labels, split: str, config: SceneConfig):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.split = split
        self.config = config
        if self.images.shape[:3] != self.labels.shape:
            raise DataError("image and label arrays disagree in shape")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def items(self):
        return list(zip(self.images, self.labels))

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.config)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.split == other.split
                and self.config == other.config
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


def palette(cfg: SceneConfig) -> np.ndarray:
    """Base RGB colour per class (before jitter and noise)."""
    k = cfg.num_classes
    cols = np.full((k, 3), 0.5)
    angles = 2 * np.pi * np.arange(k - 1) / max(k - 1, 1)
    cols[1:, 0] += cfg.coarse_offset * np.cos(angles)
    cols[1:, 1] += cfg.coarse_offset * np.sin(angles)
    cols[:, 2] += (np.arange(k) - (k - 1) / 2) * cfg.fine_step
    return cols


def _shape_mask(kind: str, h: int, w: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    if kind == "rectangle":
        sh, sw = rng.integers(h // 5, h // 2 + 1), rng.integers(w // 5, w // 2 + 1)
        top, left = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
        return (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    if kind == "disk":
        r = rng.integers(max(3, min(h, w) // 10), min(h, w) // 4 + 1)
        cy, cx = rng.integers(r, h - r), rng.integers(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # stripe: long thin band, horizontal or vertical
    thick = rng.integers(3, max(4, min(h, w) // 6 + 1))
    if rng.random() < 0.5:
        length = rng.integers(w // 2, w - 3)
        top, left = rng.integers(0, h - thick + 1), rng.integers(0, w - length + 1)
        return (yy >= top) & (yy < top + thick) & (xx >= left) & (xx < left + length)
    length = rng.integers(h // 2, h - 3)
    top, left = rng.integers(0, h - length + 1), rng.integers(0, w - thick + 1)
    return (yy >= top) & (yy < top + length) & (xx >= left) & (xx < left + thick)


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def render_scene(cfg: SceneConfig, rng, first_class: int | None = None):
    """One (uint8 image, label map) pair drawn from ``rng``."""
    h, w, k = cfg.h, cfg.w, cfg.num_classes
    colors = palette(cfg)

    def region_color(c):
        jit = np.zeros(3)
        jit[:2] = rng.uniform(-cfg.color_jitter, cfg.color_jitter, 2)
        return colors[c] + jit

    label = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    img = np.empty((h, w, 3))
    img[...] = region_color(0)
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)) if k > 1 else 0
    for s in range(n_shapes):
        cls = first_class if (s == 0 and first_class is not None) else int(rng.integers(1, k))
        for _ in range(MAX_ATTEMPTS):
            m = _shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], h, w, rng)
            if not (_dilate(m) & occupied).any():
                break
        else:
            raise DataError(f"could not place {n_shapes} non-overlapping shapes in "
                            f"{h}x{w} after {MAX_ATTEMPTS} attempts")
        occupied |= m
        label[m] = cls
        img[m] = region_color(cls)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return u8, label


def _generate_split(cfg: SceneConfig, split: str, n: int) -> Dataset:
    images = np.empty((n, cfg.h, cfg.w, 3), dtype=np.uint8)
    labels = np.empty((n, cfg.h, cfg.w), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[split], i])
        # cycling the first shape class guarantees every class shows up
        first = 1 + i % (cfg.num_classes - 1)
        images[i], labels[i] = render_scene(cfg, rng, first_class=first)
    return Dataset(images.astype(np.float32) / np.float32(255), labels, split, cfg)


def generate(cfg: SceneConfig = SceneConfig()):
    """Return ``(train, val)``; a pure function of ``cfg``."""
    cfg.validate()
    train = _generate_split(cfg, "train", cfg.train_size)
    val = _generate_split(cfg, "val", cfg.val_size)
    for ds in (train, val):
        missing = set(range(cfg.num_classes)) - set(np.unique(ds.labels).tolist())
        if missing:
            raise DataError(f"{ds.split} split lacks classes {sorted(missing)}; "
                            "increase its size")
    return train, val


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save(ds: Dataset, directory) -> None:
    """Write ``manifest.json``, ``images/NNNN.png`` (RGB) and ``labels/NNNN.png`` (L)."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:04d}.png"
        u8 = np.round(img * 255).astype(np.uint8)
        Image.fromarray(u8).save(d / "images" / name)
        Image.fromarray(lab).save(d / "labels" / name)
        entries.append({"image": f"images/{name}", "label": f"labels/{name}"})
    manifest = {
        "format": "robustseg-dataset",
        "version": 1,
        "split": ds.split,
        "ignore_label": IGNORE,
        "config": asdict(ds.config),
        "items": entries,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load(directory) -> Dataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
        split = manifest["split"]
        cfg = SceneConfig(**manifest["config"])
        entries = manifest["items"]
    except FileNotFoundError:
        raise DataError(f"{d}: no {MANIFEST}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{d}: corrupt manifest ({e})") from None
    expected = cfg.train_size if split == "train" else cfg.val_size
    if len(entries) != expected:
        raise DataError(f"{d}: manifest lists {len(entries)} items but its config "
                        f"declares {expected} for split {split!r}")
    images, labels = [], []
    for e in entries:
        try:
            img = np.asarray(Image.open(d / e["image"]).convert("RGB"))
            lab = np.asarray(Image.open(d / e["label"]))
        except (OSError, KeyError) as err:
            raise DataError(f"{d}: unreadable entry {e}: {err}") from None
        if img.shape[:2] != (cfg.h, cfg.w) or lab.shape != (cfg.h, cfg.w):
            raise DataError(f"{d}: {e} has the wrong size")
        images.append(img)
        labels.append(lab)
    images = np.stack(images).astype(np.float32) / np.float32(255)
    return Dataset(images, np.stack(labels), split, cfg)


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------

def batch_indices(n: int, m: int, seed: int):
    """Endless stream of index batches; reshuffled each epoch, remainder dropped."""
    if not 1 <= m <= n:
        raise DataError(f"batch size {m} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    per_epoch = n // m
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * m:(b + 1) * m]


def batches(ds: Dataset, m: int, seed: int, epochs: int | None = None):
    """Yield ``(images, labels)`` batches of size ``m``."""
    per_epoch = len(ds) // m
    for i, idx in enumerate(batch_indices(len(ds), m, seed)):
        if epochs is not None and i >= epochs * per_epoch:
            return
        yield ds.images[idx], ds.labels[idx]

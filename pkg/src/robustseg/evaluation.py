"""mIoU, white-/black-box BIM sweeps, label-leaking check and seed aggregation."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import bim_iterates
from .datagen import Dataset
from .errors import ConfigError, InputError
from .losses import IGNORE
from .model import SegModel, argmax_labels, forward


class SingleRunWarning(UserWarning):
    pass


@dataclass
class EvalRow:
    method: str
    arch: str
    clean_miou: float
    adv_miou: list = field(default_factory=list)
    stat: str = "mean"

    def values(self) -> list:
        return [self.clean_miou, *self.adv_miou]


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; IGNORE pixels are skipped."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, labels):
        p = np.asarray(p).ravel()
        t = np.asarray(t).ravel()
        if p.shape != t.shape:
            raise InputError("prediction and label maps differ in shape")
        keep = t != IGNORE
        cm += np.bincount(t[keep].astype(np.int64) * num_classes + p[keep],
                          minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return cm


def miou_from_confusion(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise InputError("no scored pixels")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present]))


def miou(preds, labels, num_classes: int) -> float:
    """Mean IoU from one confusion matrix accumulated over all maps.

    Classes absent from both predictions and labels are left out of the mean.
    """
    if len(preds) != len(labels):
        raise InputError("preds and labels must have the same length")
    return miou_from_confusion(confusion_matrix(preds, labels, num_classes))


def predict(model: SegModel, images, chunk: int = 32) -> np.ndarray:
    out = [argmax_labels(forward(model, images[s:s + chunk], mode="main_only"))
           for s in range(0, len(images), chunk)]
    return np.concatenate(out)


def _adv_trajectories(model: SegModel, data: Dataset, eps, alpha, n_max, chunk):
    """For every chunk of images, the list of BIM iterates 1..n_max."""
    for s in range(0, len(data), chunk):
        x = data.images[s:s + chunk]
        y = data.labels[s:s + chunk]
        yield s, list(bim_iterates(model, x, y, eps, alpha, n_max))


def _check_range(n_range):
    n_range = list(n_range)
    if not n_range or min(n_range) < 1:
        raise ConfigError("n_range must be a non-empty list of positive ints")
    return n_range


def whitebox_sweep(model: SegModel, data: Dataset, eps: float = 0.03, alpha: float = 0.01,
                   n_range=range(1, 8), method: str = "", chunk: int = 32) -> EvalRow:
    """Clean mIoU plus mIoU under BIM(eps, alpha, n) crafted on ``model`` itself.

    One BIM trajectory of ``max(n_range)`` steps provides every iteration count,
    since the iterate after ``t`` steps is exactly BIM with ``n = t``.
    """
    n_range = _check_range(n_range)
    k = model.num_classes
    clean = miou(predict(model, data.images, chunk), data.labels, k)
    cms = {n: np.zeros((k, k), dtype=np.int64) for n in n_range}
    for s, traj in _adv_trajectories(model, data, eps, alpha, max(n_range), chunk):
        y = data.labels[s:s + chunk]
        for n in n_range:
            cms[n] += confusion_matrix(predict(model, traj[n - 1], chunk), y, k)
    return EvalRow(method, model.arch_id, clean, [miou_from_confusion(cms[n]) for n in n_range])


def blackbox_sweep(targets, substitutes, data: Dataset, eps: float = 0.03, alpha: float = 0.01,
                   n_range=range(1, 8), method: str = "", chunk: int = 32) -> list:
    """One row per (target, substitute) pair: BIM crafted on the substitute,
    scored on the target. Substitutes must differ in architecture from every
    target."""
    n_range = _check_range(n_range)
    for t in targets:
        for sub in substitutes:
            if sub is t or sub.arch_id == t.arch_id:
                raise ConfigError(
                    f"substitute arch {sub.arch_id} must differ from target arch {t.arch_id}")
    clean = {id(t): miou(predict(t, data.images, chunk), data.labels, t.num_classes)
             for t in targets}
    rows = []
    for sub in substitutes:
        cms = {(id(t), n): np.zeros((t.num_classes,) * 2, dtype=np.int64)
               for t in targets for n in n_range}
        for s, traj in _adv_trajectories(sub, data, eps, alpha, max(n_range), chunk):
            y = data.labels[s:s + chunk]
            for t in targets:
                for n in n_range:
                    cms[id(t), n] += confusion_matrix(predict(t, traj[n - 1], chunk), y,
                                                      t.num_classes)
        for t in targets:
            rows.append(EvalRow(method, t.arch_id, clean[id(t)],
                                [miou_from_confusion(cms[id(t), n]) for n in n_range]))
    return rows


def detect_label_leaking(row: EvalRow) -> bool:
    """True when some adversarial mIoU strictly beats the clean mIoU."""
    return any(a > row.clean_miou for a in row.adv_miou)


def aggregate(rows) -> tuple:
    """Elementwise mean and population std over runs of one method/arch."""
    rows = list(rows)
    if not rows:
        raise InputError("nothing to aggregate")
    if len({(r.method, r.arch) for r in rows}) > 1:
        raise InputError("aggregate expects rows of a single method and arch")
    if len({len(r.adv_miou) for r in rows}) > 1:
        raise InputError("rows have different iteration counts")
    if len(rows) == 1:
        warnings.warn("single run: std row is all zeros", SingleRunWarning, stacklevel=2)
    vals = np.array([r.values() for r in rows], dtype=np.float64)
    # shift by the first run so identical runs give exactly std 0
    d = vals - vals[0]
    mean = vals[0] + d.mean(axis=0)
    std = d.std(axis=0)
    r0 = rows[0]
    return (EvalRow(r0.method, r0.arch, float(mean[0]), mean[1:].tolist(), "mean"),
            EvalRow(r0.method, r0.arch, float(std[0]), std[1:].tolist(), "std"))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def csv_header(n_max: int, leaking: bool = False) -> list:
    head = ["method", "arch", "stat", "clean"] + [f"n{i}" for i in range(1, n_max + 1)]
    return head + ["label_leaking"] if leaking else head


def rows_to_csv(rows, leaking=None) -> str:
    """Serialise rows; ``leaking`` maps (method, arch) to a flag for an extra column."""
    rows = list(rows)
    n_max = max((len(r.adv_miou) for r in rows), default=7)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(n_max, leaking is not None))
    for r in rows:
        line = [r.method, r.arch, r.stat, f"{r.clean_miou:.6f}"]
        line += [f"{v:.6f}" for v in r.adv_miou]
        if leaking is not None:
            line.append(str(bool(leaking.get((r.method, r.arch), False))).lower())
        w.writerow(line)
    return buf.getvalue()


def read_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            n = sorted((k for k in rec if k.startswith("n") and k[1:].isdigit()),
                       key=lambda k: int(k[1:]))
            rows.append(EvalRow(rec["method"], rec["arch"], float(rec["clean"]),
                                [float(rec[k]) for k in n], rec["stat"]))
    return rows

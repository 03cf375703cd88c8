"""End-to-end acceptance checks.

Trains 3 seeds of every method on arch A plus SAT substitutes on arch B with
the default configuration, then checks the twelve acceptance criteria.
Independent runs are trained in parallel worker processes (one per CPU).
Set ROBUSTSEG_ACCEPTANCE_CACHE=<dir> to keep trained runs between sessions.

Each criterion prints a PASS/FAIL line in the terminal summary.
"""
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from robustseg import datagen, kernels
from robustseg.attacks import AttackConfig, bim, fgsm
from robustseg.cli import main as cli_main
from robustseg.evaluation import (aggregate, blackbox_sweep, detect_label_leaking, miou,
                                  whitebox_sweep)
from robustseg.losses import IGNORE, LossWeights, masked_ce
from robustseg.model import build_model, forward, input_gradient, load_checkpoint, save_checkpoint
from robustseg.training import TrainConfig, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
METHODS = ("no_defense", "sat", "ddc_at", "ddc_at_m", "ddc_at_n")
DEFENDED = ("sat", "ddc_at", "ddc_at_m", "ddc_at_n")
N_RANGE = range(1, 8)
SCENE = datagen.SceneConfig()
DEMO_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "demo.ini"


def report(n, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
    assert ok, detail


def fmt(v):
    return " ".join(f"{x:.3f}" for x in v)


# ---------------------------------------------------------------------------
# training fixture
# ---------------------------------------------------------------------------

def _run_key(cfg):
    text = repr((cfg, SCENE, kernels.BACKEND))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _train_job(job):
    method, arch, seed, cache = job
    cfg = TrainConfig(method=method, arch=arch, seed=seed)
    stem = Path(cache) / f"{method}_{arch}_s{seed}_{_run_key(cfg)}"
    ckpt, meta = stem.with_suffix(".npz"), stem.with_suffix(".json")
    if not (ckpt.exists() and meta.exists()):
        tr, va = datagen.generate(SCENE)
        st = train(cfg, tr, va)
        save_checkpoint(st.model, ckpt)
        meta.write_text(json.dumps({"loss": [r.l_all for r in st.history],
                                    "mask_curve": st.mask_curve}))
    return (method, arch, seed), str(ckpt), str(meta)


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    cache = os.environ.get("ROBUSTSEG_ACCEPTANCE_CACHE") or tmp_path_factory.mktemp("runs")
    Path(cache).mkdir(parents=True, exist_ok=True)
    jobs = [(m, "A", s, str(cache)) for m in METHODS for s in SEEDS]
    jobs += [("sat", "B", s, str(cache)) for s in SEEDS]
    # longest runs first so the pool stays busy
    jobs.sort(key=lambda j: (j[1] != "B", not j[0].startswith("ddc")))
    with ProcessPoolExecutor(max_workers=os.cpu_count() or 1) as ex:
        done = list(ex.map(_train_job, jobs))
    models, logs = {}, {}
    for key, ckpt, meta in done:
        models[key] = load_checkpoint(ckpt)
        logs[key] = json.loads(Path(meta).read_text())

    _, val = datagen.generate(SCENE)
    white = {(m, s): whitebox_sweep(models[m, "A", s], val, 0.03, 0.01, N_RANGE, method=m)
             for m in METHODS for s in SEEDS}
    subs = [models["sat", "B", s] for s in SEEDS]
    black = {m: blackbox_sweep([models[m, "A", s] for s in SEEDS], subs, val, 0.03, 0.01,
                               N_RANGE, method=m) for m in DEFENDED}
    mean = {m: aggregate([white[m, s] for s in SEEDS])[0] for m in METHODS}
    for m in METHODS:
        ACCEPTANCE_LINES.append(f"         white-box mean {m:<10} clean {mean[m].clean_miou:.3f}"
                                f" | n1..n7 {fmt(mean[m].adv_miou)}")
    return dict(models=models, logs=logs, white=white, black=black, mean=mean)


# ---------------------------------------------------------------------------
# exact invariants
# ---------------------------------------------------------------------------

def test_criterion_01_attack_invariants():
    rng = np.random.default_rng(2024)
    trials, ball, dom, eq = 0, 0.0, True, 0.0
    for group in range(250):
        model = build_model("A", 4, seed=1000 + group)
        eps = float(rng.choice([0.0, 0.01, 0.03, 0.1]))
        alpha = float(rng.uniform(0.002, 0.05))
        steps = int(rng.integers(1, 8))
        x = rng.random((40, 6, 6, 3)).astype(np.float32)
        x[rng.random(x.shape) < 0.1] = 0.0
        x[rng.random(x.shape) < 0.1] = 1.0
        y = rng.integers(0, 4, (40, 6, 6)).astype(np.uint8)
        adv = bim(model, x, y, AttackConfig(eps, alpha, steps))
        one = bim(model, x, y, AttackConfig(eps, eps, 1)) if eps > 0 else x
        f = fgsm(model, x, y, eps)
        for a in (adv, f):
            ball = max(ball, float(np.abs(a.astype(np.float64) - x).max()) - eps)
            dom &= bool(a.min() >= 0 and a.max() <= 1)
        eq = max(eq, float(np.abs(one.astype(np.float64) - f).max()))
        trials += len(x)
    ok = trials == 10_000 and ball <= 1e-7 and dom and eq <= 1e-12
    report(1, ok, f"{trials} trials, max(|d|_inf - eps) = {ball:.2e}, in [0,1]: {dom}, "
                  f"|BIM(1,eps) - FGSM| = {eq:.1e}")


def test_criterion_02_gradient_check():
    worst = 0.0
    h = 1e-5
    for seed in range(3):
        rng = np.random.default_rng(seed)
        model = build_model("AB"[seed % 2], 4, seed=seed, dtype=np.float64)
        for k, v in model.params.items():
            if k.endswith("bias"):
                v[...] = rng.normal(0, 0.1, v.shape)
        x = rng.random((12, 12, 3))
        y = rng.integers(0, 4, (12, 12)).astype(np.uint8)
        g = input_gradient(model, x, y)
        for i in rng.choice(x.size, 20, replace=False):
            idx = np.unravel_index(i, x.shape)
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (masked_ce(forward(model, xp, "main_only"), y)
                  - masked_ce(forward(model, xm, "main_only"), y)) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-12))
    report(2, worst <= 1e-4, f"max relative error {worst:.2e} over 3 models x 20 coords")


def _brute_iou(preds, labels, k):
    ious = []
    for c in range(k):
        p = {(n, i, j) for n, a in enumerate(preds) for (i, j), v in np.ndenumerate(a) if v == c}
        t = {(n, i, j) for n, a in enumerate(labels) for (i, j), v in np.ndenumerate(a) if v == c}
        if p | t:
            ious.append(len(p & t) / len(p | t))
    return float(np.mean(ious))


def test_criterion_03_metric_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        labels = [rng.integers(0, 4, (8, 8))]
        preds = [rng.integers(0, 4, (8, 8))]
        worst = max(worst, abs(miou(preds, labels, 4) - _brute_iou(preds, labels, 4)))
    ex = miou([np.array([[0, 0], [1, 1]])], [np.array([[0, 1], [1, 1]])], 2)
    ok = worst <= 1e-12 and abs(ex - 7 / 12) <= 1e-12
    report(3, ok, f"max |miou - brute force| = {worst:.1e} on 100 instances; worked example {ex:.6f}")


# ---------------------------------------------------------------------------
# trained-model trends
# ---------------------------------------------------------------------------

def test_criterion_04_undefended_collapse(experiment):
    row = experiment["mean"]["no_defense"]
    adv = row.adv_miou
    mono = all(b <= a for a, b in zip(adv, adv[1:]))
    ok = row.clean_miou >= 0.90 and mono and adv[-1] <= 0.5 * row.clean_miou
    report(4, ok, f"no_defense clean {row.clean_miou:.3f} (>= 0.90), monotone {mono}, "
                  f"n7 {adv[-1]:.3f} <= {0.5 * row.clean_miou:.3f}")


def test_criterion_05_sat_defends(experiment):
    sat, nd = experiment["mean"]["sat"], experiment["mean"]["no_defense"]
    gap = sat.adv_miou[2] - nd.adv_miou[2]
    drop = nd.clean_miou - sat.clean_miou
    report(5, gap >= 0.15 and drop <= 0.10,
           f"SAT n3 - no_defense n3 = {gap:+.3f} (>= 0.15); clean drop {drop:.3f} (<= 0.10)")


def test_criterion_06_ddcat_ordering(experiment):
    d, s = experiment["mean"]["ddc_at"], experiment["mean"]["sat"]
    wins = sum(a >= b for a, b in zip(d.adv_miou, s.adv_miou))
    ok = d.clean_miou >= s.clean_miou and wins >= 6
    report(6, ok, f"clean DDC-AT {d.clean_miou:.3f} vs SAT {s.clean_miou:.3f}; "
                  f"adversarial DDC-AT >= SAT at {wins}/7 iteration counts")


def test_criterion_07_no_label_leaking(experiment):
    rows = [experiment["white"][m, s] for m in DEFENDED for s in SEEDS]
    rows += [r for m in DEFENDED for r in experiment["black"][m]]
    leaking = [r.method for r in rows if detect_label_leaking(r)]
    report(7, not leaking, f"{len(rows)} SAT/DDC-AT rows checked, leaking: {leaking or 'none'}")


def test_criterion_08_mask_sparsity(experiment):
    parts, ok = [], True
    for s in SEEDS:
        curve = experiment["logs"]["ddc_at", "A", s]["mask_curve"]
        first, final = curve[0][1], curve[-1][1]
        ok &= final < 0.05 and final < first
        parts.append(f"s{s}: it{curve[0][0]} {first:.3f} -> it{curve[-1][0]} {final:.4f}")
    report(8, ok, "held-out p=1 fraction " + "; ".join(parts))


def test_criterion_09_reduction_equivalence():
    tr, _ = datagen.generate(SCENE)
    base = dict(seed=4, max_iters=40)
    sat = train(TrainConfig(method="sat", **base), tr)
    red = train(TrainConfig(method="ddc_at", zero_mask_head=True,
                            weights=LossWeights(1.0, 0.0, 0.0), **base), tr)
    diff = max(abs(a.l_n - b.l_all) for a, b in zip(red.history, sat.history))
    ok = len(red.history) == len(sat.history) == 40 and diff <= 1e-10
    report(9, ok, f"max |L_n(DDC-AT, p=0, l2=l3=0) - L(SAT)| over 40 iterations = {diff:.1e}")


def test_criterion_10_blackbox_transfer(experiment):
    parts, ok = [], True
    for m in DEFENDED:
        bb = float(np.mean([r.adv_miou[-1] for r in experiment["black"][m]]))
        wb = experiment["mean"][m].adv_miou[-1]
        ok &= bb >= wb
        parts.append(f"{m} {bb:.3f} vs {wb:.3f}")
    report(10, ok, "n7 black-box vs white-box: " + ", ".join(parts))


def test_criterion_11_ablation_ordering(experiment):
    avg = {m: float(np.mean(experiment["mean"][m].adv_miou)) for m in DEFENDED}
    ok = (avg["ddc_at"] >= max(avg["ddc_at_m"], avg["ddc_at_n"])
          and min(avg["ddc_at_m"], avg["ddc_at_n"]) >= avg["sat"] - 0.02)
    report(11, ok, "mean adversarial mIoU " + ", ".join(f"{m} {v:.3f}" for m, v in avg.items()))


def test_criterion_12_end_to_end_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("ROBUSTSEG_OUT", raising=False)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in ("train", "eval", "report"):
            assert cli_main([cmd, "--config", str(DEMO_CONFIG), "--out", str(out)]) == 0
    names = sorted(p.name for p in (outs[0] / "eval").glob("*.csv"))
    same = all((outs[0] / "eval" / n).read_bytes() == (outs[1] / "eval" / n).read_bytes()
               for n in names)
    report(12, bool(names) and same, f"{len(names)} report CSVs byte-identical across two runs: {same}")


# ---------------------------------------------------------------------------
# smoke-run oracles that ride on the same trained models
# ---------------------------------------------------------------------------

def test_training_loss_decreases(experiment):
    for (m, a, s), log in experiment["logs"].items():
        if m in ("sat", "no_defense"):
            assert log["loss"][-1] < log["loss"][0], (m, a, s)


def test_undefended_decays_over_iterations(experiment):
    for s in SEEDS:
        row = experiment["white"]["no_defense", s]
        assert row.adv_miou[-1] <= row.adv_miou[0]
        assert row.clean_miou >= 0.90

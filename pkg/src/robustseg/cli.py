"""Command-line driver: ``robustseg {train,eval,report,ablate}``.

Output layout under ``--out`` (or ``$ROBUSTSEG_OUT``)::

    checkpoints/<method>_<arch>_s<seed>.npz          final weights
    checkpoints/<method>_<arch>_s<seed>_it<T>.npz    periodic snapshots
    history/<method>_<arch>_s<seed>.csv              iter,L_n,L_a,L_m,L_all,p1_fraction
    history/<method>_<arch>_s<seed>_mask.csv         iter,heldout_p1_fraction (DDC only)
    masks/<method>_<arch>_s<seed>/NNNN.png           with --dump-masks
    eval/whitebox.csv, eval/blackbox.csv             mean/std rows + label_leaking
    eval/whitebox_runs.csv, eval/blackbox_runs.csv   one row per run / model pair
    eval/metadata.json                               attack settings, substitute method
    figures/<mode>_<arch>.svg

Exit status: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, evaluation
from .config import ExperimentPlan, load_plan
from .errors import ConfigError
from .model import load_checkpoint, save_checkpoint
from .training import train

log = logging.getLogger("robustseg")

ABLATION_METHODS = ["sat", "ddc_at", "ddc_at_m", "ddc_at_n"]


def run_name(method: str, arch: str, seed: int) -> str:
    return f"{method}_{arch}_s{seed}"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _write_history(state, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "L_n", "L_a", "L_m", "L_all", "p1_fraction"])
        for r in state.history:
            w.writerow([r.iteration, repr(r.l_n), repr(r.l_a), repr(r.l_m), repr(r.l_all),
                        repr(r.p1_fraction)])


def _dump_masks(model, val, directory: Path, n: int = 16) -> None:
    from PIL import Image

    from .division import predict_division
    from .model import forward

    directory.mkdir(parents=True, exist_ok=True)
    p = predict_division(forward(model, val.images[:n]).o_m).p
    for i, m in enumerate(p):
        Image.fromarray((m * 255).astype(np.uint8)).save(directory / f"{i:04d}.png")


def train_one(plan: ExperimentPlan, method: str, arch: str, seed: int, out: Path,
              dump_masks: bool = False):
    """Train one run and write its checkpoint(s) and loss history."""
    train_ds, val_ds = datagen.generate(plan.scene)
    cfg = plan.train_config(method, arch, seed)
    name = run_name(method, arch, seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "history").mkdir(parents=True, exist_ok=True)

    def snapshot(state):
        every = plan.checkpoint_every
        if every and state.iteration % every == 0 and state.iteration < cfg.max_iters:
            save_checkpoint(state.model, ckpt_dir / f"{name}_it{state.iteration}.npz")

    state = train(cfg, train_ds, val_ds, callback=snapshot)
    save_checkpoint(state.model, ckpt_dir / f"{name}.npz")
    _write_history(state, out / "history" / f"{name}.csv")
    if state.mask_curve:
        with open(out / "history" / f"{name}_mask.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iter", "heldout_p1_fraction"])
            w.writerows([it, repr(fr)] for it, fr in state.mask_curve)
    if dump_masks:
        _dump_masks(state.model, val_ds, out / "masks" / name)
    log.info("trained %s (%d iterations)", name, state.iteration)
    return name


def _train_job(args):
    return train_one(*args)


def run_training(plan: ExperimentPlan, out: Path, jobs: int = 1, dump_masks: bool = False):
    runs = plan.runs()
    args = [(plan, m, a, s, out, dump_masks) for m, a, s in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_train_job, args))
    return [_train_job(a) for a in args]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _load(out: Path, method: str, arch: str, seed: int):
    path = out / "checkpoints" / f"{run_name(method, arch, seed)}.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _eval_data(plan: ExperimentPlan):
    _, val = datagen.generate(plan.scene)
    if plan.eval_size:
        val = val.subset(plan.eval_size)
    return val


def _summaries(run_rows, n_max):
    """Mean/std rows per (method, arch) plus label-leaking flags from the runs."""
    groups = {}
    for r in run_rows:
        groups.setdefault((r.method, r.arch), []).append(r)
    summary, leaking = [], {}
    for key, rows in groups.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", evaluation.SingleRunWarning)
            if len(rows) == 1:
                log.warning("%s/%s: single run, std row is zero", *key)
            mean, std = evaluation.aggregate(rows)
        summary += [mean, std]
        leaking[key] = any(evaluation.detect_label_leaking(r) for r in rows)
    return summary, leaking


def run_eval(plan: ExperimentPlan, out: Path, modes=None):
    """Write eval CSVs; returns {mode: (run rows, summary rows, leaking flags)}."""
    val = _eval_data(plan)
    n_range = range(1, plan.n_max + 1)
    modes = modes or (["whitebox", "blackbox"] if plan.eval_mode == "both" else [plan.eval_mode])
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    models = {(m, a, s): _load(out, m, a, s) for m, a, s in plan.runs()}
    results = {}
    for mode in modes:
        run_rows = []
        if mode == "whitebox":
            for (m, a, s), model in models.items():
                row = evaluation.whitebox_sweep(model, val, plan.eval_eps, plan.eval_alpha,
                                                n_range, method=m)
                row.stat = f"seed{s}"
                run_rows.append(row)
        else:
            for a in plan.archs:
                subs = [models[plan.substitute_method, b, s]
                        for b in plan.archs if b != a for s in plan.seeds]
                for m in plan.methods:
                    targets = [models[m, a, s] for s in plan.seeds]
                    rows = evaluation.blackbox_sweep(targets, subs, val, plan.eval_eps,
                                                     plan.eval_alpha, n_range, method=m)
                    # rows come substitute-major, target-minor
                    for i, row in enumerate(rows):
                        row.stat = f"seed{plan.seeds[i % len(targets)]}" \
                                   f"_sub{subs[i // len(targets)].arch_id}{subs[i // len(targets)].seed}"
                    run_rows += rows
        summary, leaking = _summaries(run_rows, plan.n_max)
        (eval_dir / f"{mode}_runs.csv").write_text(evaluation.rows_to_csv(run_rows))
        (eval_dir / f"{mode}.csv").write_text(evaluation.rows_to_csv(summary, leaking))
        results[mode] = (run_rows, summary, leaking)
    meta = {"eps": plan.eval_eps, "alpha": plan.eval_alpha, "n_max": plan.n_max,
            "modes": modes, "seeds": list(plan.seeds), "eval_images": len(val),
            "substitute_method": plan.substitute_method if "blackbox" in modes else None}
    (eval_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return results


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def run_report(plan: ExperimentPlan, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    modes = ["whitebox", "blackbox"] if plan.eval_mode == "both" else [plan.eval_mode]
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for mode in modes:
        path = out / "eval" / f"{mode}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing eval CSV {path}")
        rows = evaluation.read_csv(path)
        for arch in sorted({r.arch for r in rows}):
            with plt.rc_context({"svg.hashsalt": "robustseg", "svg.fonttype": "none"}):
                fig, ax = plt.subplots(figsize=(5, 3.5))
                for method in dict.fromkeys(r.method for r in rows if r.arch == arch):
                    mean = next(r for r in rows if (r.method, r.arch, r.stat) == (method, arch, "mean"))
                    std = next(r for r in rows if (r.method, r.arch, r.stat) == (method, arch, "std"))
                    xs = np.arange(len(mean.values()))
                    ax.errorbar(xs, mean.values(), yerr=std.values(), marker="o", ms=3,
                                capsize=3, label=method)
                ax.set_xlabel("attack iteration (0 = clean)")
                ax.set_ylabel("mIoU")
                ax.set_ylim(0, 1)
                ax.set_title(f"{mode} BIM, arch {arch}")
                ax.legend(fontsize=8)
                fig.tight_layout()
                target = fig_dir / f"{mode}_{arch}.svg"
                fig.savefig(target, format="svg", metadata={"Date": None})
                plt.close(fig)
            written.append(target)
    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustseg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train every (method, arch, seed) in the plan"),
                        ("eval", "white-/black-box sweeps over trained checkpoints"),
                        ("report", "plot eval CSVs"),
                        ("ablate", "train + white-box eval of SAT and the three DDC-AT variants")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path, default=Path("runs"))
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--n-max", type=int, default=None)
        s.add_argument("--seeds", type=str, default=None, help="comma-separated, overrides train.seed")
        s.add_argument("--dump-masks", action="store_true",
                       help="write predicted division masks of a few val images as PNGs")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(plan: ExperimentPlan, args) -> ExperimentPlan:
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: not a list of integers: {args.seeds!r}") from None
        plan = replace(plan, seeds=seeds)
    if args.n_max is not None:
        plan = replace(plan, n_max=args.n_max)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    plan.validate()
    return plan


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    out = Path(os.environ.get("ROBUSTSEG_OUT") or args.out)
    try:
        plan = _apply_overrides(load_plan(args.config), args)
        if args.command == "ablate":
            plan = replace(plan, methods=ABLATION_METHODS, eval_mode="whitebox")
            plan.validate()
            out = out / "ablation"
        if args.command in ("train", "ablate"):
            run_training(plan, out, args.jobs, args.dump_masks)
        if args.command in ("eval", "ablate"):
            run_eval(plan, out)
        if args.command in ("report", "ablate"):
            for f in run_report(plan, out):
                log.info("wrote %s", f)
    except ConfigError as e:
        print(f"robustseg: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to exit status 1
        print(f"robustseg: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

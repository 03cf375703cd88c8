"""Compare the numba and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py            # kernels only
    python benchmarks/bench_kernels.py --e2e      # plus 20 SAT iterations per backend

Kernel timings run both implementations in this process. The end-to-end
numbers start one subprocess per backend so that ROBUSTSEG_NUMBA takes effect
at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from robustseg import kernels

E2E = """
import time
from robustseg import datagen, kernels
from robustseg.training import TrainConfig, train
tr, _ = datagen.generate(datagen.SceneConfig(train_size=64, val_size=16))
train(TrainConfig(method="sat", max_iters=2), tr)  # warm-up / jit
t = time.perf_counter()
train(TrainConfig(method="sat", max_iters=20), tr)
print(kernels.BACKEND, (time.perf_counter() - t) / 20)
"""


def best_of(fn, repeat=5, number=10):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(batch=8, hw=32, cin=32, cout=32, k=4):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, hw, hw, cin)).astype(np.float32)
    w = rng.standard_normal((3, 3, cin, cout)).astype(np.float32)
    b = np.zeros(cout, np.float32)
    g = rng.standard_normal((batch, hw, hw, cout)).astype(np.float32)
    logits = rng.standard_normal((batch * hw * hw * 8, k)).astype(np.float32)
    labels = rng.integers(0, k, len(logits)).astype(np.uint8)
    weight = np.ones(len(logits), np.float32)

    cases = {
        "conv forward": (lambda: kernels.conv3x3_forward_np(x, w, b),
                         lambda: kernels.conv3x3_forward_nb(x, w, b)),
        "conv backward": (lambda: kernels.conv3x3_backward_np(x, w, g, True),
                          lambda: kernels.conv3x3_backward_nb(x, w, g, True)),
        f"softmax-xent ({len(logits)} px)": (lambda: kernels.softmax_xent_np(logits, labels, weight),
                                             lambda: kernels.softmax_xent_nb(logits, labels, weight)),
    }
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (f_np, f_nb) in cases.items():
        f_nb()  # compile
        t_np, t_nb = best_of(f_np), best_of(f_nb)
        print(f"{name:<28}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.2f}x")


def bench_e2e():
    print("\nSAT iteration (batch 8, 32x32, BIM n=3)")
    for flag in ("0", "1"):
        env = dict(os.environ, ROBUSTSEG_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]) * 1e3:8.1f} ms/iter")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true")
    args = ap.parse_args()
    bench_kernels()
    if args.e2e:
        bench_e2e()

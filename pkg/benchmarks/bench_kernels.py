"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0] [--train-step]

Sizes match one training step of the desk configuration (batch 4, T=5, four
views, 16 hypotheses).  Every pair is also checked for agreement.
With --train-step, a few full training steps are timed in a subprocess per
backend (HANDLIFT_NO_NUMBA=1 selects numpy).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from handlift import kernels
from handlift.heatmap import GRID

STEP_SNIPPET = """
import time
from handlift.config import TrainConfig
from handlift.synthetic import generate_dataset
from handlift.train import train
ds = generate_dataset(4, 10, seed=0, n_views=8)
train(TrainConfig(max_steps=2, log_every=0), ds)
t = time.perf_counter()
train(TrainConfig(max_steps={n}, log_every=0), ds)
print((time.perf_counter() - t) / {n})
"""


def cases(rng, scale):
    n_pts = int(4 * 21 * 17 * 4 * scale)  # windows x joints x hypotheses (+key) x frames-ish
    P = rng.normal(size=(4, 3, 4))
    pts = rng.uniform(0, 256, size=(n_pts, 4, 2))
    w = rng.uniform(0.1, 1.0, size=(n_pts, 4))
    yield "weighted_dlt", (kernels.weighted_dlt_nb, kernels.weighted_dlt_np), (P, pts, w)

    B = int(20 * scale) or 1
    q = rng.normal(size=(B, 21, 3)) * 50
    p = rng.normal(size=(B, 21 * 16, 3)) * 50
    yield "knn", (kernels.knn_nb, kernels.knn_np), (q, p, 8)

    n_maps = int(4 * 5 * 4 * 21 * scale) or 1
    c = rng.uniform(0, GRID - 1, size=(n_maps, 2))
    s = rng.uniform(0.8, 3.0, size=n_maps)
    pk = rng.uniform(0.1, 1.0, size=n_maps)
    yield "render_gaussians", (kernels.render_gaussians_nb, kernels.render_gaussians_np), (c, s, pk, GRID, GRID)

    maps = kernels.render_gaussians_np(c, s, pk, GRID, GRID)
    wg = rng.normal(scale=0.3, size=9)
    bg = np.array([0.1])
    yield "local_gate", (kernels.local_gate_nb, kernels.local_gate_np), (maps, wg, bg, 4.0)
    g = rng.normal(size=maps.shape)
    yield "local_gate_grad", (kernels.local_gate_grad_nb, kernels.local_gate_grad_np), (maps, wg, bg, 4.0, g)

    fmaps = rng.normal(size=(4 * 5 * 4, 16, GRID, GRID))
    uv = rng.uniform(-1, GRID, size=(4 * 5 * 4, int(21 * 17 * scale) or 1, 2))
    yield "bilinear_sample", (kernels.bilinear_sample_nb, kernels.bilinear_sample_np), (fmaps, uv)

    e = rng.uniform(0, 60, size=int(50 * 30 * 21 * scale) or 1)
    th = np.linspace(0, 50, 100)
    yield "pck_counts", (kernels.pck_counts_nb, kernels.pck_counts_np), (e, th)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    fin = np.isfinite(a) & np.isfinite(b)
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return float("inf")
    return float(np.abs(a[fin] - b[fin]).max()) if fin.any() else 0.0


def time_step(backend, n):
    env = dict(os.environ, HANDLIFT_NO_NUMBA="1" if backend == "numpy" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-step", action="store_true")
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':18s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (f_nb, f_np), fargs in cases(rng, args.scale):
        f_nb(*fargs)  # compile
        t_nb = min(timeit.repeat(lambda: f_nb(*fargs), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: f_np(*fargs), number=1, repeat=args.repeat))
        diff = max_diff(f_nb(*fargs), f_np(*fargs))
        print(f"{name:18s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f} {diff:11.2e}")

    if args.train_step:
        for backend in ("numba", "numpy"):
            print(f"train step ({backend}): {time_step(backend, args.steps):.3f} s")


if __name__ == "__main__":
    main()

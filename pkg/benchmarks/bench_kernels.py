"""Throughput comparison of the compiled and numpy q-evaluation kernels.

Run as: python3 benchmarks/bench_kernels.py [--points N] [--repeats R]

Reports q-evaluations per second per core for both backends on the 20-neuron
pendulum net, matching the performance smoke test's workload.
"""

import argparse
import time

import numpy as np

from sncbf import pendulum_model
from sncbf.diffnet import NetParams
from sncbf.kernels import BACKEND, numpy_q_batch, q_batch


def make_inputs(n_points: int, seed: int = 0):
    model = pendulum_model()
    rng = np.random.default_rng(seed)
    p, n = 20, model.n
    params = NetParams(
        theta0=rng.standard_normal((p, n)) / np.sqrt(n),
        b0=rng.standard_normal(p) * 0.1,
        theta1=rng.standard_normal(p) / np.sqrt(p),
        b1=0.0,
    )
    lo, hi = model.state_box.lo, model.state_box.hi
    X = rng.uniform(lo, hi, size=(n_points, n))
    FX = model.f_batch(X)
    GX = model.g_batch(X)
    mask_s = model.in_safe(X)
    mask_u = model.in_unsafe(X)
    sigma_sq = model.sigma_diag**2
    m = GX.shape[2]
    u_lo = np.full(m, -np.inf)
    u_hi = np.full(m, np.inf)
    args = (params.theta0, params.b0, params.theta1, params.b1, sigma_sq,
            X, FX, GX, mask_s, mask_u, 1e-3, 1.0, 0.0, u_lo, u_hi)
    return args


def bench(fn, args, repeats: int):
    fn(*args)  # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=200000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    inputs = make_inputs(args.points)
    results = {}
    for name, fn in [("compiled" if BACKEND != "numpy" else "active", q_batch),
                     ("numpy", numpy_q_batch)]:
        dt = bench(fn, inputs, args.repeats)
        rate = args.points / dt
        results[name] = rate
        print(f"{name:>9}: {dt * 1e3:8.2f} ms for {args.points} points "
              f"-> {rate / 1e6:.2f}M q-evals/s/core")

    if "compiled" in results:
        print(f"  speedup: {results['compiled'] / results['numpy']:.2f}x")
    target = 1e6
    slowest = min(results.values())
    if slowest < target:
        print(f"warning: {slowest / 1e6:.2f}M evals/s is below the "
              f"1M evals/s/core soft target")


if __name__ == "__main__":
    main()

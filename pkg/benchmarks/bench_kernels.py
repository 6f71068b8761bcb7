"""Benchmark the compiled kernel backend against the pure NumPy twin.

Run from the repo root after an editable install:

    python3 benchmarks/bench_kernels.py [--dtype f32|f64] [--reps N]

Shapes default to what a training step of the small cascaded recognizer
actually pushes through each kernel, so the numbers predict end-to-end
impact rather than peak throughput.
"""

import argparse
import time

import numpy as np

from castr.kernels import get_backend


def _time(fn, args, reps):
    fn(*args)  # warm-up / JIT-free sanity call
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best * 1e3  # ms


def build_cases(dtype):
    rng = np.random.default_rng(0)
    f = lambda *s: rng.standard_normal(s).astype(dtype)

    cases = []

    # layer norm over (rows, width) activations
    x = f(8320, 64)
    gamma = np.ones(64, dtype)
    beta = np.zeros(64, dtype)
    y = np.empty_like(x)
    mean = np.empty(8320, dtype)
    rstd = np.empty(8320, dtype)
    cases.append(("ln_fwd", (x, gamma, beta, 1e-6, y, mean, rstd)))

    dy = f(8320, 64)
    dx = np.empty_like(x)
    dgamma = np.empty(64, dtype)
    dbeta = np.empty(64, dtype)
    # mean/rstd must hold real statistics before the backward runs
    get_backend("pure").ln_fwd(x, gamma, beta, 1e-6, y, mean, rstd)
    cases.append(("ln_bwd", (dy, x, gamma, mean, rstd, dx, dgamma, dbeta)))

    # gelu over the MLP hidden activations
    h = f(2 * 1024 * 1024)
    oh = np.empty_like(h)
    cases.append(("gelu_fwd", (h, oh)))
    gh = f(2 * 1024 * 1024)
    dh = np.empty_like(h)
    cases.append(("gelu_bwd", (h, gh, dh)))

    # attention softmax rows
    s = (f(33280, 65) * 3).astype(dtype)
    os_ = np.empty_like(s)
    cases.append(("softmax_fwd", (s, os_)))
    ps = np.empty_like(s)
    get_backend("pure").softmax_fwd(s, ps)
    gs = f(33280, 65)
    ds = np.empty_like(s)
    cases.append(("softmax_bwd", (ps, gs, ds)))

    # optimizer update over a full small-model parameter vector
    n = 286_289
    p = f(n)
    g = f(n)
    m = np.zeros(n, dtype)
    v = np.zeros(n, dtype)
    cases.append(("adamw_step", (p, g, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.01, 1.0, 1.0)))

    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--reps", type=int, default=30)
    args = ap.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64

    pure = get_backend("pure")
    try:
        compiled = get_backend("compiled")
    except ImportError:
        print("compiled backend not built; nothing to compare")
        return

    print(f"dtype={args.dtype}  reps={args.reps}")
    print(f"{'kernel':<12} {'pure ms':>9} {'compiled ms':>12} {'speedup':>8}")
    for name, proto in build_cases(dtype):
        # each backend mutates its own copies so the two runs are independent
        a1 = tuple(a.copy() if isinstance(a, np.ndarray) else a for a in proto)
        a2 = tuple(a.copy() if isinstance(a, np.ndarray) else a for a in proto)
        tp = _time(getattr(pure, name), a1, args.reps)
        tc = _time(getattr(compiled, name), a2, args.reps)
        print(f"{name:<12} {tp:9.3f} {tc:12.3f} {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()

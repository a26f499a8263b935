"""Compare the compiled kernels against the numpy fallback.

Run: python3 benchmarks/kernel_bench.py [--reps 50]
"""

import argparse
import time

import numpy as np

from hrt import kernels


def timeit(fn, reps):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=256)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.rows, args.cols))
    out = np.empty_like(x)
    gain = rng.standard_normal(args.cols)
    bias = rng.standard_normal(args.cols)
    flat = rng.standard_normal(args.rows * args.cols)
    grad = rng.standard_normal(flat.shape)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)

    print(f"backend: {kernels.backend_name()} (compiled available: {kernels.HAVE_COMPILED})")
    cases = {
        "softmax": (
            lambda: kernels.softmax_lastaxis(x, out=out),
            lambda: kernels.softmax_lastaxis_numpy(x, out=out),
        ),
        "layer_norm": (
            lambda: kernels.layer_norm_fwd(x, gain, bias, out=out),
            lambda: kernels.layer_norm_fwd_numpy(x, gain, bias, out=out),
        ),
        "adam": (
            lambda: kernels.adam_update(flat, grad.copy(), m, v, 1, 1e-3, 0.9, 0.98, 1e-9),
            lambda: kernels.adam_update_numpy(flat, grad.copy(), m, v, 1, 1e-3, 0.9, 0.98, 1e-9),
        ),
    }
    print(f"{'kernel':<12} {'active (us)':>12} {'numpy (us)':>12} {'speedup':>8}")
    for name, (active, fallback) in cases.items():
        ta = timeit(active, args.reps) * 1e6
        tn = timeit(fallback, args.reps) * 1e6
        print(f"{name:<12} {ta:>12.1f} {tn:>12.1f} {tn / ta:>8.2f}x")


if __name__ == "__main__":
    main()

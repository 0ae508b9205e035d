"""Benchmark the numba kernel path against the pure-numpy reference.

Run with the backend under test selected via the environment:

    TOOLSELECT_BACKEND=numba python benchmarks/bench_kernels.py
    TOOLSELECT_BACKEND=numpy python benchmarks/bench_kernels.py

The active backend is timed against the always-available numpy reference,
so a single numba run shows both columns.
"""

import time

import numpy as np

from toolselect import kernels


def bench(fn, *args, repeats=200):
    fn(*args)  # warm up (numba JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    rng = np.random.default_rng(0)
    sizes = [(16, 512), (64, 512), (256, 512)]
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}{'shape':<14}{'active (us)':>12}{'numpy (us)':>12}{'speedup':>9}")
    for shape in sizes:
        x = rng.standard_normal(shape)
        g = rng.standard_normal(shape)
        cases = [
            ("gelu_fwd", kernels.gelu_fwd, kernels.gelu_fwd_numpy, (x,)),
            ("gelu_bwd", kernels.gelu_bwd, kernels.gelu_bwd_numpy, (x, g)),
            ("softmax_rows", kernels.softmax_rows, kernels.softmax_rows_numpy, (x,)),
        ]
        for name, active, ref, args in cases:
            ta = bench(active, *args)
            tn = bench(ref, *args)
            print(f"{name:<16}{str(shape):<14}{ta * 1e6:>12.1f}{tn * 1e6:>12.1f}"
                  f"{tn / ta:>9.2f}x")
    scores = rng.standard_normal(64)
    mask = rng.random(64) > 0.3
    ta = bench(kernels.masked_softmax, scores, mask)
    tn = bench(kernels.masked_softmax_numpy, scores, mask)
    print(f"{'masked_softmax':<16}{'(64,)':<14}{ta * 1e6:>12.1f}{tn * 1e6:>12.1f}"
          f"{tn / ta:>9.2f}x")


if __name__ == "__main__":
    main()

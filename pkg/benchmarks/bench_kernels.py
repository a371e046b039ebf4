"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

The numpy path is what runs under FTDDM_DISABLE_NUMBA=1. Results are also
checked for agreement so a fast but wrong kernel shows up here.
"""
import argparse
import time

import numpy as np

from ftddm import _kernels
from ftddm.metrics import ssim


def best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    if _kernels.ssim_moments_jit is None:
        print("numba disabled or missing; only the numpy path is available")
        return

    rng = np.random.default_rng(0)
    win = np.exp(-0.5 * (np.arange(7) - 3.0) ** 2 / 1.5 ** 2)
    win /= win.sum()
    cases = []
    for size in (64, 176, 256):
        a, b = rng.random((size, size)), rng.random((size, size))
        cases.append((f"ssim moments {size}x{size}", _kernels.ssim_moments_jit, _kernels.ssim_moments_numpy,
                      (a, b, win)))
    for n in (20, 100, 400):
        w = 2 * np.arange(1, n + 1, dtype=np.int64)
        cases.append((f"signed-rank counts n={n}", _kernels.subset_sum_counts_jit, _kernels.subset_sum_counts_numpy,
                      (w, int(w.sum()))))

    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, fast, slow, call in cases:
        fast(*call)  # compile outside the timed region
        agree = np.allclose(fast(*call), slow(*call), rtol=1e-12, atol=1e-12)
        t_fast, t_slow = best_of(fast, call, args.repeat), best_of(slow, call, args.repeat)
        print(f"{name:<28}{1e3 * t_fast:>10.3f}{1e3 * t_slow:>10.3f}{t_slow / t_fast:>9.2f}  {agree}")

    a, b = rng.random((64, 64)), rng.random((64, 64))
    print(f"end-to-end ssim 64x64: {1e3 * best_of(ssim, (a, b), args.repeat):.3f} ms per call")


if __name__ == "__main__":
    main()

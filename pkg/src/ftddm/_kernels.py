"""Hot loops for the metric stack, each with a numba and a numpy version.

The public functions dispatch to the compiled kernel when numba is enabled
(see :mod:`ftddm._accel`) and to the vectorised numpy path otherwise. Both
versions are importable so the benchmark can time them side by side.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import NUMBA_ENABLED, njit


# ------------------------------------------------------- SSIM local moments

def _ssim_moments_loop(a, b, win):
    """Valid-mode separable filtering of a, b, a*a, b*b, a*b."""
    k = win.shape[0]
    H, W = a.shape
    Wo = W - k + 1
    Ho = H - k + 1
    rows = np.zeros((5, H, Wo))
    for i in range(H):
        for j in range(Wo):
            s0 = s1 = s2 = s3 = s4 = 0.0
            for u in range(k):
                w = win[u]
                x = a[i, j + u]
                y = b[i, j + u]
                s0 += w * x
                s1 += w * y
                s2 += w * x * x
                s3 += w * y * y
                s4 += w * x * y
            rows[0, i, j] = s0
            rows[1, i, j] = s1
            rows[2, i, j] = s2
            rows[3, i, j] = s3
            rows[4, i, j] = s4
    out = np.zeros((5, Ho, Wo))
    for c in range(5):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for u in range(k):
                    s += win[u] * rows[c, i + u, j]
                out[c, i, j] = s
    return out


def ssim_moments_numpy(a, b, win):
    stack = np.stack([a, b, a * a, b * b, a * b])
    k = win.shape[0]
    rows = sliding_window_view(stack, k, axis=2) @ win
    return sliding_window_view(rows, k, axis=1) @ win


ssim_moments_jit = njit(_ssim_moments_loop)


def ssim_moments(a, b, win):
    """(5, H-k+1, W-k+1): filtered a, b, a^2, b^2, ab with 1D window ``win``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    win = np.ascontiguousarray(win, dtype=np.float64)
    if ssim_moments_jit is not None:
        return ssim_moments_jit(a, b, win)
    return ssim_moments_numpy(a, b, win)


# ------------------------------------------- signed-rank null distribution

def _subset_sum_counts_loop(weights, total):
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    acc = 0
    for w in weights:
        acc += w
        for s in range(acc, w - 1, -1):
            counts[s] += counts[s - w]
    return counts


def subset_sum_counts_numpy(weights, total):
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for w in weights:
        if w == 0:
            counts = counts * 2
            continue
        shifted = np.zeros_like(counts)
        shifted[w:] = counts[:-w]
        counts = counts + shifted
    return counts


subset_sum_counts_jit = njit(_subset_sum_counts_loop)


def subset_sum_counts(weights):
    """Number of sign assignments giving each positive-rank sum.

    ``weights`` are non-negative integers (doubled ranks, so tied half-ranks
    stay integral). Entry s of the result counts subsets summing to s.
    """
    weights = np.ascontiguousarray(weights, dtype=np.int64)
    total = int(weights.sum())
    if subset_sum_counts_jit is not None and np.all(weights > 0):
        return subset_sum_counts_jit(weights, total)
    return subset_sum_counts_numpy(weights, total)


__all__ = ["NUMBA_ENABLED", "ssim_moments", "ssim_moments_numpy", "ssim_moments_jit",
           "subset_sum_counts", "subset_sum_counts_numpy", "subset_sum_counts_jit"]

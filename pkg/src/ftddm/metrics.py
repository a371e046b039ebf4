"""Masked image-quality metrics, paired Wilcoxon tests and uncertainty maps."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from ._kernels import ssim_moments, subset_sum_counts

K1, K2 = 0.01, 0.03
WINDOW_SIGMA = 1.5
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_INF = math.inf


def _as_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask) > 0.5
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} != image shape {shape}")
    return m


def _check_pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    return ref, est


def nrmse(ref, est, mask=None):
    """||est - ref|| / ||ref|| over the masked pixels."""
    ref, est = _check_pair(ref, est)
    m = _as_mask(mask, ref.shape)
    denom = np.linalg.norm(ref[m])
    if denom == 0:
        raise ValueError("nrmse: reference is zero inside the mask")
    return float(np.linalg.norm(est[m] - ref[m]) / denom)


def psnr(ref, est, mask=None, peak=1.0):
    """10 log10(peak^2 / MSE) over the mask; ``math.inf`` when MSE is 0."""
    ref, est = _check_pair(ref, est)
    m = _as_mask(mask, ref.shape)
    mse = float(np.mean((est[m] - ref[m]) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak ** 2 / mse)


def gaussian_window(size, sigma=WINDOW_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def default_window_size(min_side):
    """11 taps when five dyadic scales fit, otherwise 7."""
    return 11 if min_side >= 11 * 2 ** 4 else 7


def max_scales(min_side, window):
    k = 0
    while k < len(MSSSIM_WEIGHTS) and min_side // (2 ** k) >= window:
        k += 1
    return k


def _ssim_maps(a, b, win, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b, e_aa, e_bb, e_ab = ssim_moments(a, b, win)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return lum * cs, cs


def _crop_mask(m, k):
    r = k // 2
    H, W = m.shape
    return m[r:H - (k - 1 - r), r:W - (k - 1 - r)]


def _masked_mean(values, m):
    if not m.any():
        raise ValueError("mask has no pixels inside the valid SSIM region")
    return float(values[m].mean())


def ssim(ref, est, mask=None, window=None, data_range=1.0):
    """Gaussian-window SSIM averaged over window centres inside ``mask``."""
    ref, est = _check_pair(ref, est)
    m = _as_mask(mask, ref.shape)
    k = window or default_window_size(min(ref.shape))
    if min(ref.shape) < k:
        raise ValueError(f"image {ref.shape} smaller than the {k}-tap SSIM window")
    smap, _ = _ssim_maps(ref, est, gaussian_window(k), data_range)
    return _masked_mean(smap, _crop_mask(m, k))


def _pool2(x):
    H, W = x.shape
    x = x[:H - H % 2, :W - W % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def msssim(ref, est, mask=None, scales=None, window=None, data_range=1.0):
    """Multi-scale SSIM with 2x2 average pooling between scales.

    The scale count defaults to the largest one the image supports with the
    chosen window; weights are renormalised over the scales used. Negative
    per-scale terms are clipped to 0 so the result stays in [0, 1].
    """
    ref, est = _check_pair(ref, est)
    m = _as_mask(mask, ref.shape).astype(np.float64)
    k = window or default_window_size(min(ref.shape))
    feasible = max_scales(min(ref.shape), k)
    if scales is None:
        scales = feasible
    if scales < 1 or scales > feasible:
        raise ValueError(f"{scales} scales requested; image {ref.shape} supports at most {feasible} "
                         f"with a {k}-tap window")
    w = np.array(MSSSIM_WEIGHTS[:scales])
    w = w / w.sum()
    win = gaussian_window(k)
    vals = []
    a, b = ref, est
    for j in range(scales):
        smap, cs = _ssim_maps(a, b, win, data_range)
        mc = _crop_mask(m > 0.5, k)
        vals.append(_masked_mean(smap if j == scales - 1 else cs, mc))
        if j < scales - 1:
            a, b, m = _pool2(a), _pool2(b), _pool2(m)
    vals = np.clip(np.array(vals), 0.0, None)
    return float(np.prod(vals ** w))


# ------------------------------------------------- differentiable variants

def _torch_window(k, dtype, device=None):
    return torch.as_tensor(gaussian_window(k), dtype=dtype, device=device)


def _torch_moments(a, b, win):
    k = win.shape[0]
    stack = torch.cat([a, b, a * a, b * b, a * b], dim=1)
    c = stack.shape[1]
    wr = win.view(1, 1, 1, k).expand(c, 1, 1, k)
    wc = win.view(1, 1, k, 1).expand(c, 1, k, 1)
    out = F.conv2d(F.conv2d(stack, wr, groups=c), wc, groups=c)
    return out.chunk(5, dim=1)


def _torch_maps(a, b, win, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b, e_aa, e_bb, e_ab = _torch_moments(a, b, win)
    cs = (2 * (e_ab - mu_a * mu_b) + c2) / (e_aa - mu_a ** 2 + e_bb - mu_b ** 2 + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return lum * cs, cs


def _torch_masked_mean(values, m):
    return (values * m).sum(dim=(1, 2, 3)) / m.sum(dim=(1, 2, 3)).clamp_min(1e-12)


def ssim_torch(ref, est, mask=None, window=None, data_range=1.0):
    """Per-sample SSIM of (B, 1, H, W) tensors; differentiable."""
    k = window or default_window_size(min(ref.shape[-2:]))
    m = torch.ones_like(ref) if mask is None else (mask > 0.5).to(ref.dtype)
    smap, _ = _torch_maps(ref, est, _torch_window(k, ref.dtype, ref.device), data_range)
    r = k // 2
    return _torch_masked_mean(smap, m[..., r:r + smap.shape[-2], r:r + smap.shape[-1]])


def msssim_torch(ref, est, mask=None, scales=None, window=None, data_range=1.0):
    """Per-sample MS-SSIM of (B, 1, H, W) tensors; differentiable."""
    k = window or default_window_size(min(ref.shape[-2:]))
    feasible = max_scales(min(ref.shape[-2:]), k)
    scales = scales or feasible
    if scales > feasible:
        raise ValueError(f"{scales} scales requested; at most {feasible} supported")
    w = torch.as_tensor(MSSSIM_WEIGHTS[:scales], dtype=ref.dtype, device=ref.device)
    w = w / w.sum()
    win = _torch_window(k, ref.dtype, ref.device)
    m = torch.ones_like(ref) if mask is None else (mask > 0.5).to(ref.dtype)
    a, b = ref, est
    r = k // 2
    vals = []
    for j in range(scales):
        smap, cs = _torch_maps(a, b, win, data_range)
        mc = (m[..., r:r + smap.shape[-2], r:r + smap.shape[-1]] > 0.5).to(ref.dtype)
        vals.append(_torch_masked_mean(smap if j == scales - 1 else cs, mc))
        if j < scales - 1:
            a, b, m = (F.avg_pool2d(t, 2) for t in (a, b, m))
    vals = torch.stack(vals, dim=1).clamp_min(0.0)
    # clamp before pow keeps the gradient finite where a term hits 0
    return torch.exp((w * torch.log(vals.clamp_min(1e-12))).sum(dim=1))


# ---------------------------------------------------------------- wilcoxon

@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n_nonzero: int
    method: str


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    return d, ranks


def wilcoxon_exact_p(ranks, t_plus):
    """Two-sided p-value by enumerating all 2^n sign assignments."""
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = subset_sum_counts(doubled)
    probs = counts / counts.sum()
    t2 = int(round(2 * t_plus))
    lower = probs[:t2 + 1].sum()
    upper = probs[t2:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def wilcoxon_normal_p(ranks, t_plus):
    """Two-sided p-value, normal approximation with tie and continuity correction."""
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    if var <= 0:
        return 1.0
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(math.erfc(z / math.sqrt(2)))


def wilcoxon_signed_rank(a, b, method="auto", min_pairs=10):
    """Paired two-sided Wilcoxon signed-rank test with zero differences dropped.

    ``method``: 'exact' (enumeration), 'normal', or 'auto' (exact for at most
    20 non-zero differences).
    """
    if len(a) != len(b):
        raise ValueError("wilcoxon: paired samples differ in length")
    if len(a) < min_pairs:
        raise ValueError(f"wilcoxon: need at least {min_pairs} pairs, got {len(a)}")
    d, ranks = _signed_ranks(a, b)
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    t_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= 20 else "normal"
    if method == "exact":
        p = wilcoxon_exact_p(ranks, t_plus)
    elif method == "normal":
        p = wilcoxon_normal_p(ranks, t_plus)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(t_plus, p, n, method)


# ------------------------------------------------------------- uncertainty

def uncertainty_map(sampler, y, config, n=50):
    """Pixelwise std over ``n`` samples per condition, zero outside the mask.

    ``sampler(y, config)`` must return an object with ``x0_hat`` (B, 1, H, W);
    the condition batch is repeated ``n`` times so every draw gets its own
    random stream. Returns a (B, H, W) array.
    """
    if n < 2:
        raise ValueError("uncertainty_map needs n >= 2 samples")
    rep = y.repeat(n)
    res = sampler(rep, config)
    x = res.x0_hat.detach().cpu().double().numpy().reshape(y.batch, n, *res.x0_hat.shape[-2:])
    std = x.std(axis=1, ddof=1)
    return std * (y.mask.detach().cpu().numpy()[:, 0] > 0.5)


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, image, ref, est, mask, **keys):
        row = {"image": image, **keys,
               "nrmse": nrmse(ref, est, mask), "psnr": psnr(ref, est, mask), "ssim": ssim(ref, est, mask)}
        self.rows.append(row)
        return row

    def aggregate(self, group_by=("method", "s"), metrics=("nrmse", "psnr", "ssim")):
        groups = defaultdict(list)
        for r in self.rows:
            groups[tuple(r.get(k) for k in group_by)].append(r)
        out = []
        for key, rows in groups.items():
            agg = dict(zip(group_by, key))
            agg["n"] = len(rows)
            for m in metrics:
                v = np.array([r[m] for r in rows], dtype=float)
                agg[f"{m}_mean"] = float(np.mean(v))
                agg[f"{m}_std"] = float(np.std(v))
            out.append(agg)
        return out

    def to_csv(self, path):
        _write_rows(path, self.rows)

    def aggregate_csv(self, path, group_by=("method", "s")):
        _write_rows(path, self.aggregate(group_by))


def _write_rows(path, rows):
    if not rows:
        raise ValueError("nothing to write")
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)

"""Noise schedule and the masked forward (noising) process."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances with a gamma[0] = 1 sentinel.

    ``beta``, ``sigma`` are indexed 1..T (entry 0 is unused and set to 0);
    ``gamma`` is indexed 0..T. ``timesteps`` holds the original chain index
    of each entry, which differs from ``range(T + 1)`` for respaced chains.
    """

    beta: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.gamma) - 1

    @classmethod
    def from_gammas(cls, gamma, timesteps=None) -> "NoiseSchedule":
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma[0] != 1.0:
            raise ValueError("gamma[0] must be exactly 1")
        if np.any(np.diff(gamma) >= 0):
            raise ValueError("gamma must be strictly decreasing")
        beta = np.zeros_like(gamma)
        beta[1:] = 1.0 - gamma[1:] / gamma[:-1]
        sigma = np.zeros_like(gamma)
        sigma[1:] = np.sqrt((1.0 - gamma[:-1]) / (1.0 - gamma[1:]) * beta[1:])
        if timesteps is None:
            timesteps = np.arange(len(gamma))
        for a in (beta, gamma, sigma):
            a.setflags(write=False)
        timesteps = np.asarray(timesteps, dtype=np.int64)
        timesteps.setflags(write=False)
        return cls(beta, gamma, sigma, timesteps)

    def respace(self, steps: int) -> "NoiseSchedule":
        """Evenly strided sub-chain of ``steps`` timesteps ending at T."""
        return self.subchain(self.T, steps)

    def subchain(self, t_start: int, steps: int) -> "NoiseSchedule":
        """Evenly strided sub-chain over [0, t_start] using ``steps`` steps."""
        if steps < 1:
            raise ValueError("respacing needs at least one step")
        if steps > t_start or t_start > self.T:
            raise ValueError(f"cannot take {steps} steps over [0, {t_start}] (T={self.T})")
        picked = np.unique(np.round(np.linspace(0, t_start, steps + 1)).astype(np.int64))
        return NoiseSchedule.from_gammas(self.gamma[picked], timesteps=self.timesteps[picked])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "gamma", "sigma"])
            for i in range(self.T + 1):
                w.writerow([int(self.timesteps[i]), repr(float(self.beta[i])),
                            repr(float(self.gamma[i])), repr(float(self.sigma[i]))])


def build_cosine_schedule(T: int, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + offset) / (1 + offset)) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    beta = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    gamma = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule.from_gammas(gamma)


def _check_t(t, T, allow_zero=True):
    lo = 0 if allow_zero else 1
    if not lo <= t <= T:
        raise ValueError(f"timestep {t} outside [{lo}, {T}]")


def _coef(values, t, like):
    """Gather per-sample coefficients for scalar or per-batch ``t``."""
    if isinstance(t, (int, np.integer)):
        return float(values[t])
    idx = torch.as_tensor(t).long().cpu().numpy()
    return torch.as_tensor(values[idx], dtype=like.dtype).view(-1, *([1] * (like.dim() - 1)))


def forward_marginal(x0, t, eps, sched: NoiseSchedule, mask=None):
    """Sample q(x_t | x_0); noise and signal are both restricted to ``mask``.

    ``t`` may be an int or a per-sample integer tensor. t = 0 returns x0.
    """
    ts = [int(t)] if isinstance(t, (int, np.integer)) else torch.as_tensor(t).view(-1).tolist()
    for ti in ts:
        _check_t(ti, sched.T)
    g = _coef(sched.gamma, t, x0)
    if isinstance(g, float):
        xt = (g ** 0.5) * x0 + ((1.0 - g) ** 0.5) * eps
    else:
        xt = g.sqrt() * x0 + (1.0 - g).sqrt() * eps
    return xt * mask if mask is not None else xt


def forward_step(x_prev, t, eps, sched: NoiseSchedule, mask=None):
    """Sample q(x_t | x_{t-1}) for 1 <= t <= T, restricted to ``mask``."""
    _check_t(int(t), sched.T, allow_zero=False)
    b = float(sched.beta[t])
    xt = (1.0 - b) ** 0.5 * x_prev + b ** 0.5 * eps
    return xt * mask if mask is not None else xt

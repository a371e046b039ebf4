"""Reverse-process samplers with instrumented function-evaluation counts."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .denoiser import ConditionStack
from .schedule import NoiseSchedule

METHODS = ("ddpm", "respace", "dpm_solver_pp", "ftddm", "ftddm+solver")


@dataclass
class SampleConfig:
    method: str = "ftddm"
    T_trunc: int = 100
    step_budget: int | None = None
    tau_d: float = 0.9
    tau_f: float = 0.9
    seed: int = 0
    s: float | None = None
    trace: bool = False
    index_offset: int = 0
    clip_x0: tuple | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        for name in ("tau_d", "tau_f"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.T_trunc < 0:
            raise ValueError("T_trunc must be >= 0")
        if self.clip_x0 is not None:
            self.clip_x0 = tuple(float(v) for v in self.clip_x0)
            if len(self.clip_x0) != 2 or not self.clip_x0[0] < self.clip_x0[1]:
                raise ValueError("clip_x0 must be a (low, high) pair with low < high")
        if self.method == "ftddm+solver":
            if self.step_budget is None or self.step_budget >= self.T_trunc:
                raise ValueError("ftddm+solver needs step_budget < T_trunc (use plain ftddm otherwise)")


@dataclass
class SampleResult:
    x0_hat: torch.Tensor
    nfe: int
    wall_time: float
    trace: list = field(default_factory=list)


class _Counted:
    """Wraps a network and counts batched evaluations."""

    def __init__(self, net):
        self.net = net
        self.calls = 0

    def predict_noise(self, y, x_t, t):
        self.calls += 1
        return self.net.predict_noise(y, x_t, t)

    def sample(self, y, tau_f, noise):
        self.calls += 1
        return self.net.sample(y, tau_f=tau_f, noise=noise)


def _noise(seed, purpose, it, like, offset=0):
    b = like.shape[0]
    return nx.normal(seed, purpose, it, tuple(like.shape), indices=range(offset, offset + b),
                     dtype=like.dtype)


def _record(trace, t, x, mask):
    m = mask > 0.5
    vals = x[m]
    trace.append((int(t), float(vals.mean()), float(vals.std())))


def ancestral_step(x_t, i, eps_hat, sched: NoiseSchedule, tau_d, z, mask=None, clip=None):
    """x_{i-1} from x_i along ``sched`` (index i >= 1).

    ``z`` is standard normal; the stochastic term is ``sigma_i * tau_d * z`` and
    is dropped entirely at i = 1.

    With ``clip=(lo, hi)`` the implied clean image is clamped to that range
    and the step uses the posterior mean instead. Where nothing is clamped the
    two forms agree; near t = T, where gamma is tiny, clamping stops small
    noise-prediction errors from being amplified into a divergent chain.
    """
    if i < 1:
        raise ValueError("ancestral_step needs i >= 1")
    beta = float(sched.beta[i])
    gamma = float(sched.gamma[i])
    if clip is None:
        mean = (x_t - beta / math.sqrt(1.0 - gamma) * eps_hat) / math.sqrt(1.0 - beta)
    else:
        x0 = ((x_t - math.sqrt(1.0 - gamma) * eps_hat) / math.sqrt(gamma)).clamp(*clip)
        mean = posterior_mean(x_t, x0, i, sched)
    if i > 1 and z is not None and tau_d > 0:
        mean = mean + float(sched.sigma[i]) * tau_d * z
    return mean * mask if mask is not None else mean


def posterior_mean(x_t, x0, i, sched: NoiseSchedule):
    """Closed-form mean of q(x_{i-1} | x_i, x_0)."""
    g, g_prev, b = float(sched.gamma[i]), float(sched.gamma[i - 1]), float(sched.beta[i])
    return (math.sqrt(g_prev) * b / (1 - g)) * x0 + (math.sqrt(1 - b) * (1 - g_prev) / (1 - g)) * x_t


@torch.no_grad()
def run_chain(denoiser, y: ConditionStack, sched: NoiseSchedule, x_start, tau_d, seed, trace=None, offset=0,
              clip=None):
    """Iterate the ancestral update from index ``sched.T`` down to 0."""
    x = x_start * y.mask
    for i in range(sched.T, 0, -1):
        t_orig = int(sched.timesteps[i])
        eps_hat = denoiser.predict_noise(y, x, t_orig)
        z = _noise(seed, "ancestral", t_orig, x, offset) if (i > 1 and tau_d > 0) else None
        x = ancestral_step(x, i, eps_hat, sched, tau_d, z, y.mask, clip)
        if trace is not None:
            _record(trace, sched.timesteps[i - 1], x, y.mask)
    return x


def _prior(y, seed, offset, dtype):
    return nx.normal(seed, "prior", 0, tuple(y.lr.shape), indices=range(offset, offset + y.batch),
                     dtype=dtype) * y.mask


def _with_s(y, cfg):
    return y if cfg is None or cfg.s is None else y.with_s(cfg.s)


def sample_ddpm(denoiser, y, sched: NoiseSchedule, tau_d=0.9, seed=0, trace=False, offset=0, clip=None):
    t0 = time.perf_counter()
    net = _Counted(denoiser)
    tr = [] if trace else None
    x = run_chain(net, y, sched, _prior(y, seed, offset, y.lr.dtype), tau_d, seed, tr, offset, clip)
    return SampleResult(x, net.calls, time.perf_counter() - t0, tr or [])


def sample_respaced(denoiser, y, sched: NoiseSchedule, steps, tau_d=0.9, seed=0, trace=False, offset=0, clip=None):
    if steps < 1:
        raise ValueError("respaced sampling needs steps >= 1")
    return sample_ddpm(denoiser, y, sched.respace(steps), tau_d, seed, trace, offset, clip)


# ------------------------------------------------------------ DPM-Solver++

def _continuous(sched: NoiseSchedule):
    t = sched.timesteps[1:].astype(np.float64)
    log_g = np.log(sched.gamma[1:])
    lam = 0.5 * (log_g - np.log1p(-sched.gamma[1:]))
    return t, log_g, lam


def gamma_at(sched: NoiseSchedule, t):
    """gamma at a (possibly fractional) timestep, log-linear between integers."""
    ts, log_g, _ = _continuous(sched)
    return np.exp(np.interp(t, ts, log_g))


def half_log_snr(sched: NoiseSchedule, t):
    g = gamma_at(sched, t)
    return 0.5 * np.log(g / (1.0 - g))


def solver_timesteps(sched: NoiseSchedule, t_start, steps, t_end=1.0):
    """``steps + 1`` timesteps from t_start to t_end, uniform in half-log-SNR."""
    if steps < 1:
        raise ValueError("solver needs at least one step")
    ts, log_g, _ = _continuous(sched)
    lam_grid = np.linspace(half_log_snr(sched, t_start), half_log_snr(sched, t_end), steps + 1)
    # gamma = sigmoid(2 lam); log gamma is linear in t between integers, so
    # inverting through log gamma lands exactly on the requested lam
    target = -np.logaddexp(0.0, -2.0 * lam_grid)
    t_grid = np.interp(target, log_g[::-1], ts[::-1])
    t_grid[0], t_grid[-1] = t_start, t_end
    return t_grid


@torch.no_grad()
def dpm_solver_pp(denoiser, y, sched: NoiseSchedule, x_start, t_start, steps, trace=None, clip=None):
    """Second-order multistep DPM-Solver++ on the data prediction.

    Integrates the probability-flow ODE from ``t_start`` to t = 1 with
    ``steps`` network evaluations; the first step is first order.
    """
    t_grid = solver_timesteps(sched, t_start, steps)
    g = gamma_at(sched, t_grid)
    alpha, sigma = np.sqrt(g), np.sqrt(1 - g)
    lam = np.log(alpha) - np.log(sigma)
    x = x_start * y.mask
    prev_x0 = None
    for i in range(steps):
        eps_hat = denoiser.predict_noise(y, x, float(t_grid[i]))
        x0_hat = (x - sigma[i] * eps_hat) / alpha[i]
        if clip is not None:
            x0_hat = x0_hat.clamp(*clip)
        h = lam[i + 1] - lam[i]
        if prev_x0 is None:
            d = x0_hat
        else:
            r = (lam[i] - lam[i - 1]) / h
            d = (1 + 1 / (2 * r)) * x0_hat - (1 / (2 * r)) * prev_x0
        x = (sigma[i + 1] / sigma[i]) * x - alpha[i + 1] * math.expm1(-h) * d
        x = x * y.mask
        prev_x0 = x0_hat
        if trace is not None:
            _record(trace, round(float(t_grid[i + 1])), x, y.mask)
    return x


def sample_dpm_solver_pp(denoiser, y, sched: NoiseSchedule, steps, seed=0, trace=False, offset=0, clip=None):
    if steps < 2:
        raise ValueError("DPM-Solver++ needs steps >= 2")
    t0 = time.perf_counter()
    net = _Counted(denoiser)
    tr = [] if trace else None
    x = dpm_solver_pp(net, y, sched, _prior(y, seed, offset, y.lr.dtype), sched.T, steps, tr, clip)
    return SampleResult(x, net.calls, time.perf_counter() - t0, tr or [])


# ------------------------------------------------------------------ FTDDM

def _flow_seed(flow, y, tau_f, seed, offset):
    noise = None
    if tau_f > 0:
        noise = nx.normal(seed, "flow", 0, flow.net.latent_shape(y.batch), indices=range(offset, offset + y.batch),
                          dtype=y.lr.dtype)
    with torch.no_grad():
        return flow.sample(y, tau_f, noise)


def sample_ftddm(denoiser, flow, y, sched: NoiseSchedule, config: SampleConfig):
    """Flow draws x_{T_trunc}; ancestral steps T_trunc..1 finish the chain.

    T_trunc = 0 is pure flow sampling; T_trunc = T is plain DDPM (flow unused).
    """
    cfg = config
    if cfg.T_trunc > sched.T:
        raise ValueError(f"T_trunc {cfg.T_trunc} exceeds T = {sched.T}")
    if cfg.T_trunc == sched.T:
        if denoiser is None:
            raise ValueError("diffusion-only sampling needs a denoiser")
        return sample_ddpm(denoiser, y, sched, cfg.tau_d, cfg.seed, cfg.trace, cfg.index_offset, cfg.clip_x0)
    if flow is None:
        raise ValueError("ftddm sampling needs a trained flow")
    if cfg.T_trunc > 0 and denoiser is None:
        raise ValueError("ftddm sampling with T_trunc > 0 needs a denoiser")
    t0 = time.perf_counter()
    fl = _Counted(flow)
    x = _flow_seed(fl, y, cfg.tau_f, cfg.seed, cfg.index_offset)
    tr = [] if cfg.trace else None
    if tr is not None:
        _record(tr, cfg.T_trunc, x, y.mask)
    calls = fl.calls
    if cfg.T_trunc > 0:
        net = _Counted(denoiser)
        x = run_chain(net, y, sched.subchain(cfg.T_trunc, cfg.T_trunc), x, cfg.tau_d, cfg.seed, tr,
                      cfg.index_offset, cfg.clip_x0)
        calls += net.calls
    return SampleResult(x, calls, time.perf_counter() - t0, tr or [])


def sample_ftddm_with_solver(denoiser, flow, y, sched: NoiseSchedule, config: SampleConfig):
    """Flow draws x_{T_trunc}; DPM-Solver++ integrates the rest in step_budget evaluations."""
    cfg = config
    if cfg.step_budget is None or cfg.step_budget >= cfg.T_trunc:
        raise ValueError("step_budget must be < T_trunc; use plain ftddm otherwise")
    if flow is None or denoiser is None:
        raise ValueError("ftddm+solver needs both a flow and a denoiser")
    t0 = time.perf_counter()
    fl = _Counted(flow)
    net = _Counted(denoiser)
    x = _flow_seed(fl, y, cfg.tau_f, cfg.seed, cfg.index_offset)
    tr = [] if cfg.trace else None
    x = dpm_solver_pp(net, y, sched, x, cfg.T_trunc, cfg.step_budget, tr, cfg.clip_x0)
    return SampleResult(x, fl.calls + net.calls, time.perf_counter() - t0, tr or [])


def sample(method_or_cfg, y, sched, denoiser=None, flow=None, **overrides):
    """Dispatch on ``SampleConfig.method``; ``cfg.s`` overrides the conditioned factor."""
    cfg = method_or_cfg if isinstance(method_or_cfg, SampleConfig) else SampleConfig(method_or_cfg, **overrides)
    y = _with_s(y, cfg)
    was = [(m, m.training) for m in (denoiser, flow) if m is not None]
    for m, _ in was:
        m.eval()
    try:
        if cfg.method == "ddpm":
            return sample_ddpm(denoiser, y, sched, cfg.tau_d, cfg.seed, cfg.trace, cfg.index_offset, cfg.clip_x0)
        if cfg.method == "respace":
            return sample_respaced(denoiser, y, sched, cfg.step_budget or 100, cfg.tau_d, cfg.seed, cfg.trace,
                                   cfg.index_offset, cfg.clip_x0)
        if cfg.method == "dpm_solver_pp":
            return sample_dpm_solver_pp(denoiser, y, sched, cfg.step_budget or 100, cfg.seed, cfg.trace,
                                        cfg.index_offset, cfg.clip_x0)
        if cfg.method == "ftddm":
            return sample_ftddm(denoiser, flow, y, sched, cfg)
        return sample_ftddm_with_solver(denoiser, flow, y, sched, cfg)
    finally:
        for m, mode in was:
            m.train(mode)


def sample_batched(cfg: SampleConfig, y: ConditionStack, sched, denoiser=None, flow=None, batch_size=64):
    """Run :func:`sample` in chunks; random streams follow the global sample index."""
    outs, nfe, wall, trace = [], None, 0.0, []
    for start in range(0, y.batch, batch_size):
        idx = slice(start, min(start + batch_size, y.batch))
        sub = SampleConfig(**{**cfg.__dict__, "index_offset": cfg.index_offset + start})
        res = sample(sub, y.index(idx), sched, denoiser, flow)
        outs.append(res.x0_hat)
        nfe = res.nfe if nfe is None else nfe
        if nfe != res.nfe:
            raise RuntimeError("NFE differs between chunks")
        wall += res.wall_time
        trace += res.trace
    return SampleResult(torch.cat(outs), nfe, wall, trace)


def expected_nfe(cfg: SampleConfig, T=1000):
    """Declared NFE for a configuration (checked against the counters in tests)."""
    if cfg.method == "ddpm":
        return T
    if cfg.method in ("respace", "dpm_solver_pp"):
        return cfg.step_budget or 100
    if cfg.method == "ftddm":
        if cfg.T_trunc == T:
            return T
        return cfg.T_trunc + 1
    return cfg.step_budget + 1


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_in_mask", "std_in_mask"])
        w.writerows(trace)

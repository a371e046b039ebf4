"""Training loops for the denoiser and the flow, plus the ablation switches."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .denoiser import ConditionStack, Denoiser, DenoiserConfig, diffusion_loss
from .flow import ConditionalFlow, FlowConfig, flow_loss
from .phantom import LR_SIZES, AugmentConfig, Dataset, augment_sample, kspace_truncate, make_splits, upscaling_factor
from .schedule import build_cosine_schedule, forward_marginal

log = logging.getLogger(__name__)

# Background fill for the flow target when T_trunc = 0: with no diffusion
# noise the area outside the mask is exactly zero, which has no density.
BACKGROUND_NOISE = 1e-2


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``last_good`` names the newest sound checkpoint."""

    def __init__(self, detail, last_good=None):
        super().__init__(f"{detail} (last good checkpoint: {last_good})")
        self.last_good = last_good


@dataclass
class TrainConfig:
    data: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    fold: int = 0
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    lr_final_fraction: float = 0.0
    T: int = 1000
    T_trunc: int = 100
    lam: float = 10.0
    alpha: float = 0.84
    lr_sizes: tuple = LR_SIZES
    val_every: int = 250
    val_images: int = 32
    log_every: int = 50
    augment: bool = True
    use_mask: bool = True
    use_mri: bool = True
    denoiser: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lr_sizes = tuple(int(v) for v in self.lr_sizes)
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 <= self.T_trunc <= self.T:
            raise ValueError(f"T_trunc must lie in [0, {self.T}]")
        if not self.lr_sizes:
            raise ValueError("lr_sizes is empty")

    def denoiser_config(self, image_size):
        kw = {"image_size": image_size, **self.denoiser}
        kw.update(use_mask=self.use_mask, use_mri=self.use_mri)
        return DenoiserConfig(**kw)

    def flow_config(self, image_size):
        kw = {"image_size": image_size, **self.flow}
        kw.update(use_mask=self.use_mask, use_mri=self.use_mri)
        return FlowConfig(**kw)

    def to_dict(self):
        d = asdict(self)
        d["lr_sizes"] = list(self.lr_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def ablation_switches(config: TrainConfig, drop_mask=False, drop_mri=False, drop_guide=False, T_trunc=None):
    """Copy of ``config`` with design elements switched off.

    Dropping a channel that is already absent, or dropping the guide loss of
    a model that has no flow (T_trunc = T), is contradictory and rejected.
    """
    d = config.to_dict()
    if drop_mask:
        if not config.use_mask:
            raise ValueError("mask channel already dropped")
        d["use_mask"] = False
    if drop_mri:
        if not config.use_mri:
            raise ValueError("MRI channels already dropped")
        d["use_mri"] = False
    if T_trunc is not None:
        d["T_trunc"] = T_trunc
    if drop_guide:
        if d["T_trunc"] == config.T:
            raise ValueError("drop_guide needs a flow, but T_trunc = T disables it")
        if config.lam == 0:
            raise ValueError("guide loss already dropped")
        d["lam"] = 0.0
    return TrainConfig.from_dict(d)


# ----------------------------------------------------------------- batches

def build_condition(values, mask, t1, flair, L, dtype=torch.float32):
    """Single-sample (x0, lr, mask, t1, flair, s) arrays for LR size ``L``."""
    _, lr = kspace_truncate(values, L, mask)
    return values * mask, lr, mask, t1, flair, upscaling_factor(values.shape[-1], L)


def stack_batch(items, dtype=torch.float32):
    """Tensors from a list of :func:`build_condition` tuples."""
    def t(k):
        return torch.from_numpy(np.stack([it[k] for it in items])[:, None]).to(dtype)
    y = ConditionStack(t(1), t(2), t(3), t(4), torch.tensor([it[5] for it in items], dtype=dtype))
    return t(0), y


def make_batch(dataset: Dataset, pairs, sizes, rng=None, augment_cfg=None, dtype=torch.float32):
    """(x0, ConditionStack) for (slice, metabolite) ``pairs`` at LR sizes ``sizes``."""
    items = []
    for (si, mi), L in zip(pairs, sizes):
        values, mask, t1, flair = dataset.sample(si, mi)
        if augment_cfg is not None:
            chans, mask = augment_sample(np.stack([values, t1, flair]), mask, rng, augment_cfg)
            values, t1, flair = chans
        items.append(build_condition(values, mask, t1, flair, int(L)))
    return stack_batch(items, dtype)


def split_subjects(dataset: Dataset, fold=0, seed=0):
    """Train/val/test subject indices; tiny datasets train and validate on everything."""
    n = len(dataset.subjects)
    if n < 5:
        everyone = list(range(n))
        return everyone, everyone, everyone
    return make_splits(n, fold, seed=seed)


class _Batches:
    def __init__(self, dataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        train, val, _ = split_subjects(dataset, cfg.fold, cfg.seed)
        self.train = dataset.images(train)
        val_pairs = dataset.images(val)
        pick = nx.stream(cfg.seed, "val-pick").permutation(len(val_pairs))[:cfg.val_images]
        self.val = [val_pairs[i] for i in sorted(pick)]
        self.val_sizes = [cfg.lr_sizes[k % len(cfg.lr_sizes)] for k in range(len(self.val))]
        self.aug = AugmentConfig() if cfg.augment else None

    def train_batch(self, it):
        rng = nx.stream(self.cfg.seed, "batch", it)
        idx = rng.integers(0, len(self.train), size=self.cfg.batch_size)
        sizes = rng.choice(self.cfg.lr_sizes, size=self.cfg.batch_size)
        return make_batch(self.dataset, [self.train[i] for i in idx], sizes, rng, self.aug)

    def val_batches(self, size=16):
        for start in range(0, len(self.val), size):
            sl = slice(start, start + size)
            yield start, make_batch(self.dataset, self.val[sl], self.val_sizes[sl])


# --------------------------------------------------------------- the loops

@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val: float
    history: list


def _flow_target(x0, y, sched, T_trunc, seed, it, index0=0, purpose="flow-target"):
    eps = nx.normal(seed, purpose, it, tuple(x0.shape), indices=range(index0, index0 + x0.shape[0]),
                    dtype=x0.dtype)
    if T_trunc == 0:
        return x0 + BACKGROUND_NOISE * eps * (1 - y.mask)
    return forward_marginal(x0, T_trunc, eps, sched)


def _guide_target(flow, x0, sched, T_trunc):
    if flow.config.guide_target_scaled:
        return math.sqrt(sched.gamma[T_trunc]) * x0
    return None


class _Run:
    """Shared bookkeeping: run directory, CSV log, checkpoints, LR schedule."""

    def __init__(self, kind, cfg: TrainConfig, model, namespace, columns, meta):
        self.kind, self.cfg, self.model, self.ns = kind, cfg, model, namespace
        self.dir = Path(cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        self.best = self.dir / f"{kind}_best.ckpt"
        self.last = self.dir / f"{kind}_last.ckpt"
        self.log_path = self.dir / f"{kind}_log.csv"
        self.fh = open(self.log_path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["iteration", "lr", "train_loss", *columns, "val_loss"])
        self.meta = meta
        self.best_val = math.inf
        self.last_good = None
        self.history = []
        self.opt = nx.Adam(model.named_parameters(), lr=cfg.lr)

    def lr_at(self, it):
        return nx.linear_decay_lr(self.cfg.lr, it, self.cfg.iterations, self.cfg.lr_final_fraction)

    def save(self, path, it, val):
        meta = {**self.meta, "kind": self.kind, "iteration": it, "val_loss": val, "config": self.cfg.to_dict()}
        nx.save_checkpoint(path, nx.module_tensors(self.model, self.ns), meta)

    def step(self, it, loss):
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{self.kind}: non-finite loss at iteration {it}", self.last_good)
        self.opt.zero_grad()
        nx.backward(loss)
        try:
            self.opt.step(self.lr_at(it))
        except nx.NonFiniteGradientError as exc:
            raise TrainingDiverged(f"{self.kind}: {exc} at iteration {it}", self.last_good) from exc

    def record(self, it, loss, extra, val):
        row = [it, self.lr_at(it), loss, *extra, "" if val is None else val]
        self.writer.writerow(row)
        self.history.append(row)
        if val is not None:
            self.save(self.last, it, val)
            self.last_good = self.last
            if val <= self.best_val:
                self.best_val = val
                self.save(self.best, it, val)
                self.last_good = self.best
            self.fh.flush()

    def close(self):
        self.fh.close()
        return TrainResult(self.best, self.last, self.log_path, self.best_val, self.history)


def _should_validate(cfg, it):
    return it % cfg.val_every == 0 or it == cfg.iterations


def train_denoiser(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Fit eps_theta on t ~ U{1..T_trunc}; keep the lowest-validation-loss checkpoint."""
    cfg = config
    if cfg.T_trunc < 1:
        raise ValueError("T_trunc = 0 has no diffusion part to train")
    sched = build_cosine_schedule(cfg.T)
    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.denoiser_config(dataset.size))
    batches = _Batches(dataset, cfg)
    meta = {"denoiser": model.config.to_dict(), "T": cfg.T, "T_trunc": cfg.T_trunc}
    run = _Run("denoiser", cfg, model, "denoiser", [], meta)

    def validate():
        model.eval()
        total, n = 0.0, 0
        with torch.no_grad():
            for start, (x0, y) in batches.val_batches():
                b = x0.shape[0]
                t = torch.from_numpy(np.array([nx.stream(cfg.seed, "val-t", 0, start + k).integers(1, cfg.T_trunc + 1)
                                               for k in range(b)]))
                eps = nx.normal(cfg.seed, "val-eps", 0, tuple(x0.shape), indices=range(start, start + b))
                total += float(diffusion_loss(model, x0, y, sched, cfg.T_trunc, eps=eps, t=t)) * b
                n += b
        model.train()
        return total / max(n, 1)

    try:
        model.train()
        for it in range(1, cfg.iterations + 1):
            x0, y = batches.train_batch(it)
            loss = diffusion_loss(model, x0, y, sched, cfg.T_trunc, rng_seed=cfg.seed, iteration=it)
            run.step(it, loss)
            loss = float(loss.detach())
            val = validate() if _should_validate(cfg, it) else None
            if val is not None or it % cfg.log_every == 0:
                run.record(it, loss, [], val)
                if val is not None:
                    log.info("denoiser it %d loss %.4f val %.4f", it, loss, val)
    finally:
        result = run.close()
    return result


def train_flow(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Fit the flow on x_{T_trunc} with NLL + lam * guide loss."""
    cfg = config
    if cfg.T_trunc >= cfg.T:
        raise ValueError("T_trunc = T means diffusion only; there is no flow to train")
    sched = build_cosine_schedule(cfg.T)
    torch.manual_seed(cfg.seed + 1)
    model = ConditionalFlow(cfg.flow_config(dataset.size))
    batches = _Batches(dataset, cfg)
    meta = {"flow": model.config.to_dict(), "T": cfg.T, "T_trunc": cfg.T_trunc}
    run = _Run("flow", cfg, model, "flow", ["nll", "guide"], meta)

    def validate():
        model.eval()
        total, n = 0.0, 0
        with torch.no_grad():
            for start, (x0, y) in batches.val_batches():
                xt = _flow_target(x0, y, sched, cfg.T_trunc, cfg.seed, 0, start, "val-flow-target")
                loss, _, _ = flow_loss(model, xt, x0, y, cfg.lam, cfg.alpha, _guide_target(model, x0, sched, cfg.T_trunc))
                total += float(loss) * x0.shape[0]
                n += x0.shape[0]
        model.train()
        return total / max(n, 1)

    try:
        model.train()
        for it in range(1, cfg.iterations + 1):
            x0, y = batches.train_batch(it)
            xt = _flow_target(x0, y, sched, cfg.T_trunc, cfg.seed, it)
            if it == 1:
                with torch.no_grad():
                    model(xt, y)  # data-dependent actnorm init on the first batch
                model.mark_initialized()
            loss, nll, guide = flow_loss(model, xt, x0, y, cfg.lam, cfg.alpha,
                                         _guide_target(model, x0, sched, cfg.T_trunc))
            run.step(it, loss)
            loss = float(loss.detach())
            val = validate() if _should_validate(cfg, it) else None
            if val is not None or it % cfg.log_every == 0:
                run.record(it, loss, [float(nll.detach()), float(guide.detach())], val)
                if val is not None:
                    log.info("flow it %d loss %.4f (nll %.4f guide %.4f) val %.4f",
                             it, loss, float(nll.detach()), float(guide.detach()), val)
    finally:
        result = run.close()
    return result


# ---------------------------------------------------------------- loading

def load_denoiser(path):
    tensors, meta = nx.load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint (kind={meta.get('kind')!r})")
    model = Denoiser(DenoiserConfig(**meta["denoiser"]))
    nx.load_module_tensors(model, tensors, "denoiser")
    return model.eval(), meta


def load_flow(path):
    tensors, meta = nx.load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValueError(f"{path}: not a flow checkpoint (kind={meta.get('kind')!r})")
    model = ConditionalFlow(FlowConfig(**meta["flow"]))
    nx.load_module_tensors(model, tensors, "flow")
    model.mark_initialized()
    return model.eval(), meta

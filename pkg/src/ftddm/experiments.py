"""Desk-scale experiment protocol shared by the CLI sweeps and the acceptance run."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import psnr, ssim, nrmse
from .phantom import generate_dataset, load_dataset
from .samplers import SampleConfig, sample_batched
from .schedule import build_cosine_schedule
from .training import (TrainConfig, load_denoiser, load_flow, make_batch, split_subjects, train_denoiser,
                       train_flow)

log = logging.getLogger(__name__)


@dataclass
class Protocol:
    """Everything needed to rebuild the trained models from scratch."""

    subjects: int = 16
    data_seed: int = 0
    n_slices: int = 6
    size: int = 64
    seed: int = 0
    fold: int = 0
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    T: int = 1000
    T_trunc: int = 100
    val_every: int = 250
    val_images: int = 32
    denoiser: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)

    def train_config(self, out_dir, data, T_trunc):
        return TrainConfig(data=str(data), out_dir=str(out_dir), seed=self.seed, fold=self.fold,
                           iterations=self.iterations, batch_size=self.batch_size, lr=self.lr, T=self.T,
                           T_trunc=T_trunc, val_every=self.val_every, val_images=self.val_images,
                           denoiser=dict(self.denoiser), flow=dict(self.flow))


@dataclass
class Models:
    sched: object
    ftddm_denoiser: object = None
    ddpm_denoiser: object = None
    flow: object = None
    timings: dict = field(default_factory=dict)


def _fresh(run_dir: Path, ckpt: Path, cfg: TrainConfig):
    """True when ``ckpt`` exists and was trained with exactly ``cfg``."""
    echo = run_dir / "config.json"
    if not ckpt.exists() or not echo.exists():
        return False
    return json.loads(echo.read_text()) == json.loads(json.dumps(cfg.to_dict()))


def prepare(workdir, protocol: Protocol) -> Models:
    """Generate data and train (or reuse) the FTDDM denoiser, baseline denoiser and flow."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    timings = {}
    data = work / "data"
    t0 = time.perf_counter()
    manifest = data / "manifest.json"
    expected = {"seed": protocol.data_seed, "n": protocol.subjects, "slices": protocol.n_slices, "size": protocol.size}
    stamp = work / "data_stamp.json"
    if not (manifest.exists() and stamp.exists() and json.loads(stamp.read_text()) == expected):
        generate_dataset(data, protocol.subjects, protocol.data_seed, protocol.n_slices, protocol.size)
        stamp.write_text(json.dumps(expected))
    timings["data"] = time.perf_counter() - t0
    dataset = load_dataset(data)

    runs = {
        "ftddm_denoiser": (train_denoiser, protocol.T_trunc, "denoiser"),
        "ddpm_denoiser": (train_denoiser, protocol.T, "denoiser"),
        "flow": (train_flow, protocol.T_trunc, "flow"),
    }
    paths = {}
    for name, (fn, t_trunc, kind) in runs.items():
        run_dir = work / name
        cfg = protocol.train_config(run_dir, data, t_trunc)
        ckpt = run_dir / f"{kind}_best.ckpt"
        t0 = time.perf_counter()
        if not _fresh(run_dir, ckpt, cfg):
            log.info("training %s", name)
            fn(dataset, cfg)
            (run_dir / "train_seconds.txt").write_text(f"{time.perf_counter() - t0:.1f}\n")
        timings[name] = float((run_dir / "train_seconds.txt").read_text()) if (run_dir / "train_seconds.txt").exists() \
            else time.perf_counter() - t0
        paths[name] = ckpt
    return Models(build_cosine_schedule(protocol.T), load_denoiser(paths["ftddm_denoiser"])[0],
                  load_denoiser(paths["ddpm_denoiser"])[0], load_flow(paths["flow"])[0], timings)


# --------------------------------------------------------------- evaluation

def held_out_pairs(dataset, fold=0, seed=0, limit=None):
    """(slice, metabolite) pairs of the held-out test subjects, in a fixed order."""
    _, _, test = split_subjects(dataset, fold, seed)
    pairs = dataset.images(test)
    return pairs if limit is None else pairs[:limit]


def run_method(models: Models, cfg: SampleConfig, y, batch_size=64):
    """Pick the right denoiser for ``cfg`` and sample."""
    if cfg.method in ("ddpm", "respace", "dpm_solver_pp") or (cfg.method == "ftddm" and cfg.T_trunc == models.sched.T):
        den = models.ddpm_denoiser
    else:
        den = models.ftddm_denoiser
    return sample_batched(cfg, y, models.sched, den, models.flow, batch_size)


def score(x0, x0_hat, y):
    """Per-image (ssim, psnr, nrmse) arrays, restricted to each mask."""
    ref = x0.detach().double().numpy()[:, 0]
    est = x0_hat.detach().double().numpy()[:, 0]
    mask = y.mask.detach().numpy()[:, 0]
    out = {"ssim": [], "psnr": [], "nrmse": []}
    for r, e, m in zip(ref, est, mask):
        out["ssim"].append(ssim(r, e, m))
        out["psnr"].append(psnr(r, e, m))
        out["nrmse"].append(nrmse(r, e, m))
    return {k: np.asarray(v) for k, v in out.items()}


def evaluate(models: Models, dataset, pairs, L, cfg: SampleConfig, conditioned_s=None, batch_size=64):
    """Sample every pair at LR size ``L`` and score against the ground truth."""
    x0, y = make_batch(dataset, pairs, [L] * len(pairs))
    if conditioned_s is not None:
        cfg = replace(cfg, s=conditioned_s)
    res = run_method(models, cfg, y, batch_size)
    scores = score(x0, res.x0_hat, y)
    return scores, res

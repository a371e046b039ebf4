"""Command-line entry point: ``ftddm <command> [flags]``.

Commands: generate-data, train, sample, evaluate, sweep. Failures exit
nonzero and print one line ``ERROR <Class>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import metrics
from .experiments import Models, held_out_pairs, run_method, score
from .phantom import LR_SIZES, generate_dataset, load_dataset, read_slice, write_slice
from .samplers import METHODS, SampleConfig, write_trace
from .schedule import build_cosine_schedule
from .training import TrainConfig, TrainingDiverged, load_denoiser, load_flow, make_batch, train_denoiser, train_flow

log = logging.getLogger("ftddm")


class UsageError(Exception):
    exit_code = 2


class DataError(Exception):
    exit_code = 3


class CheckpointError(Exception):
    exit_code = 4


# ---------------------------------------------------------------- helpers

def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"not a comma-separated number list: {text!r}") from exc
    if not vals:
        raise UsageError("empty sweep range")
    return vals


def _size_for(size, s):
    L = size / s
    if abs(L - round(L)) > 1e-9 or int(round(L)) not in LR_SIZES + (size,):
        raise UsageError(f"s = {s} gives LR size {L:g}; valid sizes are {LR_SIZES}")
    return int(round(L))


def _load_data(path, flag="--data"):
    if not path:
        raise UsageError(f"{flag} is required (dataset directory)")
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"{flag} {path}: {exc}") from exc


def _checkpoint(loader, path, flag):
    if not path:
        return None, None
    if not Path(path).exists():
        raise CheckpointError(f"{flag} {path} does not exist")
    try:
        return loader(path)
    except ValueError as exc:
        raise CheckpointError(f"{flag} {path}: {exc}") from exc


def _image_name(dataset, pair):
    si, mi = pair
    subject = dataset.subjects[dataset.subject_of[si]]
    local = list(dataset.slice_indices([dataset.subject_of[si]])).index(si)
    return f"{subject}_slice{local:02d}_{dataset.metabolites[mi]}"


def _save_png(path, img):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imsave(path, np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1)


def _models_for(args):
    den, den_meta = _checkpoint(load_denoiser, args.denoiser, "--denoiser")
    flow, flow_meta = _checkpoint(load_flow, args.flow, "--flow")
    return den, den_meta, flow, flow_meta


def _check_method(cfg: SampleConfig, T, den_meta, flow_meta):
    """Reject method/checkpoint combinations that cannot run."""
    needs_flow = cfg.method == "ftddm+solver" or (cfg.method == "ftddm" and cfg.T_trunc < T)
    needs_den = cfg.method != "ftddm" or cfg.T_trunc > 0
    if needs_flow and flow_meta is None:
        raise CheckpointError(f"method {cfg.method} with T_trunc={cfg.T_trunc} needs --flow")
    if needs_den and den_meta is None:
        raise CheckpointError(f"method {cfg.method} needs --denoiser")
    if needs_flow and flow_meta["T_trunc"] != cfg.T_trunc:
        raise CheckpointError(f"flow was trained for T_trunc={flow_meta['T_trunc']}, requested {cfg.T_trunc}")
    if needs_den:
        reach = T if (cfg.method in ("ddpm", "respace", "dpm_solver_pp") or cfg.T_trunc == T) else cfg.T_trunc
        if den_meta["T_trunc"] < reach:
            raise CheckpointError(f"denoiser covers t <= {den_meta['T_trunc']} but the method needs t <= {reach}")


# ---------------------------------------------------------------- commands

def cmd_generate_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    if args.subjects < 1:
        raise UsageError("--subjects must be >= 1")
    manifest = generate_dataset(out, args.subjects, args.seed, args.slices, args.size)
    print(f"wrote {manifest}")


def cmd_train(args):
    try:
        cfg = TrainConfig.load(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"--config {args.config} not found") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--config {args.config}: {exc}") from exc
    overrides = {k: v for k, v in (("data", args.data), ("out_dir", args.out), ("iterations", args.iterations))
                 if v is not None}
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    dataset = _load_data(cfg.data, "--data (or config 'data')")
    fn = train_denoiser if args.model == "denoiser" else train_flow
    result = fn(dataset, cfg)
    print(f"best checkpoint {result.best_checkpoint} (val loss {result.best_val:.6g})")


def _clip(args):
    return (0.0, 1.0) if args.clip_x0 else None


def _sample_config(args):
    try:
        return SampleConfig(method=args.method, T_trunc=args.t_trunc, step_budget=args.steps, tau_d=args.tau_d,
                            tau_f=args.tau_f, seed=args.seed, s=args.cond_s, trace=args.trace,
                            clip_x0=_clip(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_sample(args):
    dataset = _load_data(args.data)
    sched = build_cosine_schedule(args.T)
    cfg = _sample_config(args)
    den, den_meta, flow, flow_meta = _models_for(args)
    _check_method(cfg, sched.T, den_meta, flow_meta)
    L = _size_for(dataset.size, args.s)
    pairs = held_out_pairs(dataset, args.fold, args.split_seed, limit=args.n)
    if not pairs:
        raise DataError("no test images")
    x0, y = make_batch(dataset, pairs, [L] * len(pairs))
    models = Models(sched, den, den, flow)
    res = run_method(models, cfg, y, args.batch_size)

    out = Path(args.out)
    for sub in ("pred", "ref", "png"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names = [_image_name(dataset, p) for p in pairs]
    pred = res.x0_hat.detach().double().numpy()[:, 0]
    ref = x0.numpy()[:, 0]
    mask = y.mask.numpy()[:, 0]
    for name, p, r, m in zip(names, pred, ref, mask):
        write_slice(out / "pred" / f"{name}.bin", p[None])
        write_slice(out / "ref" / f"{name}.bin", np.stack([r, m]))
        _save_png(out / "png" / f"{name}.png", np.concatenate([r, p], axis=1))
    report = {"method": cfg.method, "s": args.s, "conditioned_s": args.cond_s if args.cond_s else args.s,
              "T": sched.T, "T_trunc": cfg.T_trunc, "step_budget": cfg.step_budget, "tau_d": cfg.tau_d,
              "tau_f": cfg.tau_f, "seed": cfg.seed, "clip_x0": cfg.clip_x0, "n": len(names), "nfe": res.nfe,
              "wall_time": round(res.wall_time, 3), "denoiser": args.denoiser, "flow": args.flow,
              "data": str(args.data)}
    if cfg.trace:
        write_trace(out / "trace.csv", res.trace)
    if args.uncertainty:
        if args.uncertainty < 2:
            raise UsageError("--uncertainty needs at least 2 samples")
        (out / "uncertainty").mkdir(exist_ok=True)
        umap = metrics.uncertainty_map(lambda yy, c: run_method(models, c, yy, args.batch_size), y, cfg,
                                       n=args.uncertainty)
        for name, u in zip(names, umap):
            write_slice(out / "uncertainty" / f"{name}.bin", u[None])
            _save_png(out / "uncertainty" / f"{name}.png", u / max(float(u.max()), 1e-12))
        report["uncertainty_samples"] = args.uncertainty
    (out / "run.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"NFE {res.nfe} ({cfg.method}, T_trunc={cfg.T_trunc}); {len(names)} samples in {out}")


def _run_dirs(paths):
    runs = []
    for p in map(Path, paths):
        if (p / "run.json").exists():
            runs.append(p)
        else:
            runs += sorted(q for q in p.iterdir() if (q / "run.json").exists()) if p.is_dir() else []
    if not runs:
        raise DataError(f"no sample runs (run.json) under {', '.join(map(str, paths))}")
    return runs


def cmd_evaluate(args):
    ref_dir = Path(args.ref)
    if not ref_dir.is_dir():
        raise DataError(f"--ref {ref_dir} is not a directory")
    refs = {p.stem: p for p in ref_dir.glob("*.bin")}
    group_by = tuple(k.strip() for k in args.group_by.split(",") if k.strip())
    report = metrics.MetricReport()
    per_method = {}
    for run in _run_dirs(args.pred):
        info = json.loads((run / "run.json").read_text())
        pred_dir = run / "pred" if (run / "pred").is_dir() else run
        preds = {p.stem: p for p in pred_dir.glob("*.bin")}
        unmatched = sorted(set(preds) - set(refs))
        if unmatched:
            raise DataError(f"{run}: no reference for {', '.join(unmatched)}")
        if not preds:
            raise DataError(f"{run}: no predictions")
        label = tuple(info.get(k) for k in group_by)
        for name in sorted(preds):
            est = read_slice(preds[name])[0]
            ref_arr = read_slice(refs[name])
            row = report.add(name, ref_arr[0], est, ref_arr[1], **{k: info.get(k) for k in group_by})
            per_method.setdefault(label, {})[name] = row["ssim"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    report.aggregate_csv(out / "summary.csv", group_by)
    rows = []
    for a, b in combinations(sorted(per_method, key=str), 2):
        common = sorted(set(per_method[a]) & set(per_method[b]))
        if len(common) < 2:
            continue
        va = [per_method[a][k] for k in common]
        vb = [per_method[b][k] for k in common]
        res = metrics.wilcoxon_signed_rank(va, vb, min_pairs=2)
        rows.append({"a": "/".join(map(str, a)), "b": "/".join(map(str, b)), "n": len(common),
                     "mean_ssim_a": float(np.mean(va)), "mean_ssim_b": float(np.mean(vb)),
                     "statistic": res.statistic, "p_value": res.p_value, "test": res.method})
    with open(out / "wilcoxon.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["a", "b", "n", "mean_ssim_a", "mean_ssim_b", "statistic", "p_value", "test"])
        w.writeheader()
        w.writerows(rows)
    for agg in report.aggregate(group_by):
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()))


def _plot(path, xs, series, xlabel, ylabel, title, kind="line"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        if kind == "line":
            ax.plot(xs, ys, marker="o", label=label)
    if kind == "grid":
        im = ax.imshow(np.array(list(series.values())), cmap="viridis")
        ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
        ax.set_yticks(range(len(series)), list(series))
        fig.colorbar(im, ax=ax)
    else:
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_sweep(args):
    dataset = _load_data(args.data)
    sched = build_cosine_schedule(args.T)
    den, den_meta = _checkpoint(load_denoiser, args.denoiser, "--denoiser")
    base, base_meta = _checkpoint(load_denoiser, args.ddpm_denoiser, "--ddpm-denoiser")
    flow, flow_meta = _checkpoint(load_flow, args.flow, "--flow")
    models = Models(sched, den, base, flow)
    pairs = held_out_pairs(dataset, args.fold, args.split_seed, limit=args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def run(cfg, L, s_cond=None, **keys):
        x0, y = make_batch(dataset, pairs, [L] * len(pairs))
        if s_cond is not None:
            y = y.with_s(s_cond)
        res = run_method(models, cfg, y, args.batch_size)
        sc = score(x0, res.x0_hat, y)
        row = {**keys, "nfe": res.nfe, "n": len(pairs), "psnr": float(np.mean(sc["psnr"])),
               "ssim": float(np.mean(sc["ssim"])), "nrmse": float(np.mean(sc["nrmse"]))}
        rows.append(row)
        log.info("%s", row)
        return row

    L = _size_for(dataset.size, args.s)
    clip = _clip(args)
    if args.kind == "truncation":
        if base is None or den is None or flow is None:
            raise CheckpointError("truncation sweep needs --denoiser, --ddpm-denoiser and --flow")
        steps = [int(v) for v in _floats(args.values or "20,50,100")]
        for k in steps:
            run(SampleConfig("respace", step_budget=k, tau_d=args.tau_d, seed=args.seed, clip_x0=clip), L, method="respace", steps=k)
            run(SampleConfig("dpm_solver_pp", step_budget=k, seed=args.seed, clip_x0=clip), L, method="dpm_solver_pp", steps=k)
            if k - 1 < flow_meta["T_trunc"]:
                run(SampleConfig("ftddm+solver", T_trunc=flow_meta["T_trunc"], step_budget=k - 1, tau_f=args.tau_f,
                                 seed=args.seed, clip_x0=clip), L, method="ftddm+solver", steps=k)
            if k == flow_meta["T_trunc"] + 1 or k == flow_meta["T_trunc"]:
                run(SampleConfig("ftddm", T_trunc=flow_meta["T_trunc"], tau_d=args.tau_d, tau_f=args.tau_f,
                                 seed=args.seed, clip_x0=clip), L, method="ftddm", steps=k)
        methods = sorted({r["method"] for r in rows})
        _plot(out / "truncation.png", steps, {m: [next((r["ssim"] for r in rows if r["method"] == m and r["steps"] == k),
                                                        np.nan) for k in steps] for m in methods},
              "sampling steps", "SSIM", "SSIM vs steps")
    elif args.kind == "temperature":
        if flow is None or den is None:
            raise CheckpointError("temperature sweep needs --denoiser and --flow")
        taus = _floats(args.values or "0,0.2,0.4,0.6,0.8,0.9,1.0")
        for tau in taus:
            kw = {"tau_d": tau, "tau_f": args.tau_f} if args.param == "tau_d" else {"tau_d": args.tau_d, "tau_f": tau}
            run(SampleConfig("ftddm", T_trunc=flow_meta["T_trunc"], seed=args.seed, clip_x0=clip, **kw), L,
                method="ftddm", **{args.param: tau})
        _plot(out / "temperature.png", taus, {"SSIM": [r["ssim"] for r in rows]}, args.param, "SSIM",
              f"SSIM vs {args.param}")
        _plot(out / "temperature_psnr.png", taus, {"PSNR": [r["psnr"] for r in rows]}, args.param, "PSNR",
              f"PSNR vs {args.param}")
    else:
        if flow is None or den is None:
            raise CheckpointError("mismatch sweep needs --denoiser and --flow")
        grid = _floats(args.values or "2,4,8")
        for actual in grid:
            for cond in grid:
                run(SampleConfig("ftddm", T_trunc=flow_meta["T_trunc"], tau_d=args.tau_d, tau_f=args.tau_f,
                                 seed=args.seed, clip_x0=clip), _size_for(dataset.size, actual), s_cond=cond,
                    method="ftddm", actual_s=actual, conditioned_s=cond)
        _plot(out / "mismatch.png", grid,
              {f"actual {a:g}": [r["ssim"] for r in rows if r["actual_s"] == a] for a in grid},
              "conditioned s", "actual s", "SSIM", kind="grid")
    _write_csv(out / f"{args.kind}.csv", rows)
    (out / "sweep.json").write_text(json.dumps({k: v for k, v in vars(args).items() if k != "func"},
                                               indent=2, sort_keys=True, default=str) + "\n")
    print(f"{len(rows)} rows written to {out / (args.kind + '.csv')}")


def _write_csv(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="ftddm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    g.add_argument("--subjects", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--slices", type=int, default=6)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the denoiser or the flow from a JSON config")
    t.add_argument("--model", choices=("denoiser", "flow"), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    def model_flags(q):
        q.add_argument("--data")
        q.add_argument("--denoiser")
        q.add_argument("--flow")
        q.add_argument("--T", type=int, default=1000)
        q.add_argument("--fold", type=int, default=0)
        q.add_argument("--split-seed", type=int, default=0)
        q.add_argument("--n", type=int, default=None, help="number of test images (default: all)")
        q.add_argument("--s", type=float, default=4.0, help="actual upscaling factor")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--tau-d", type=float, default=0.9)
        q.add_argument("--tau-f", type=float, default=0.9)
        q.add_argument("--batch-size", type=int, default=64)
        q.add_argument("--clip-x0", action="store_true",
                       help="clamp the implied clean image to [0, 1] at every reverse step")
        q.add_argument("--out", required=True)

    s = sub.add_parser("sample", help="super-resolve test images with one sampler")
    model_flags(s)
    s.add_argument("--method", choices=METHODS, default="ftddm")
    s.add_argument("--t-trunc", type=int, default=100)
    s.add_argument("--steps", type=int, default=None, help="step budget (respace, solver, ftddm+solver)")
    s.add_argument("--cond-s", type=float, default=None, help="conditioned upscaling factor (default: --s)")
    s.add_argument("--uncertainty", type=int, default=0, help="samples per image for the uncertainty map")
    s.add_argument("--trace", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="score sample runs against references")
    e.add_argument("--pred", nargs="+", required=True, help="run directories (or a parent of them)")
    e.add_argument("--ref", required=True)
    e.add_argument("--group-by", default="method,s")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="truncation / temperature / condition-mismatch sweeps")
    model_flags(w)
    w.add_argument("--kind", choices=("truncation", "temperature", "mismatch"), required=True)
    w.add_argument("--ddpm-denoiser", help="full-range denoiser for the respaced and solver baselines")
    w.add_argument("--values", help="comma-separated sweep values")
    w.add_argument("--param", choices=("tau_d", "tau_f"), default="tau_d")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        args.func(args)
    except (UsageError, DataError, CheckpointError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except TrainingDiverged as exc:
        print(f"ERROR TrainingDiverged: {exc}", file=sys.stderr)
        return 5
    except (ValueError, OSError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

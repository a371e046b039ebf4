"""Acceptance criteria 1-10, one test each.

Every test prints an ``ACCEPTANCE <n> PASS|FAIL: <detail>`` line and the
session summary repeats them in order. Criteria 5-8 need the trained
desk-scale models; they are trained on first use into ``WORKDIR`` (see
acceptance_protocol.py) and reused afterwards. Run on its own with

    pytest tests/test_acceptance.py -v -s
"""
import json
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

import gradient_suite
import metric_oracles as oracle
from acceptance_protocol import FLOW_ONLY_ITERATIONS, PROTOCOL, WORKDIR, report
from conftest import TINY_DENOISER
from ftddm import metrics
from ftddm.cli import main as cli_main
from ftddm.denoiser import Denoiser, DenoiserConfig
from ftddm.experiments import evaluate, held_out_pairs, prepare, run_method
from ftddm.flow import ActNorm, ConditionalFlow, FlowConfig
from ftddm.phantom import LR_SIZES, METABOLITES, PhantomSpec, generate_phantom, kspace_truncate, load_dataset, \
    read_slice, upscaling_factor
from ftddm.samplers import SampleConfig, expected_nfe, sample
from ftddm.schedule import build_cosine_schedule, forward_marginal, forward_step
from ftddm.training import build_condition, make_batch, stack_batch
from linear_gaussian import empirical_order, solver_errors

SCHED = build_cosine_schedule(1000)
S_EVAL = 4.0
BATCH = 64


@pytest.fixture(scope="module")
def models():
    return prepare(WORKDIR, PROTOCOL)


@pytest.fixture(scope="module")
def dataset(models):
    return load_dataset(WORKDIR / "data")


@pytest.fixture(scope="module")
def pairs(dataset):
    return held_out_pairs(dataset, PROTOCOL.fold, PROTOCOL.seed)


def _perturbed_flow(config, dtype, x_init, y_init, seed=0):
    """Flow with every zero-initialised layer perturbed and actnorm data-initialised."""
    torch.manual_seed(seed)
    flow = ConditionalFlow(config).to(dtype)
    with torch.no_grad():
        for name, p in flow.named_parameters():
            if p.dim() == 4:
                p.add_(0.02 * torch.randn_like(p))
            elif "bias" in name and "scale" not in name:
                p.add_(0.01 * torch.randn_like(p))
        flow.train()
        flow(x_init, y_init)
    flow.mark_initialized()
    for m in flow.modules():
        if isinstance(m, ActNorm):
            assert m.initialized.item() == 1.0
    return flow.eval()


# --------------------------------------------------------------------- 1

def test_01_flow_exactness():
    t0 = time.perf_counter()
    items, rng = [], np.random.default_rng(0)
    for k in range(100):
        ph = generate_phantom(PhantomSpec(seed=1000 + k, size=64, n_slices=1))
        met = METABOLITES[k % len(METABOLITES)]
        items.append(build_condition(ph.maps[met], ph.mask, ph.t1, ph.flair, int(rng.choice(LR_SIZES))))
    x0, y = stack_batch(items, torch.float32)
    eps = torch.from_numpy(rng.standard_normal(x0.shape)).float()
    x_t = forward_marginal(x0, PROTOCOL.T_trunc, eps, SCHED)
    flow = _perturbed_flow(FlowConfig(image_size=64, **PROTOCOL.flow), torch.float32, x_t[:16], y.index(slice(0, 16)))
    with torch.no_grad():
        z, _, _, _ = flow(x_t, y)
        back = flow.inverse(z, y)
    round_trip = float((back - x_t).abs().max())

    small = FlowConfig(image_size=8, scales=2, steps_per_scale=2, hidden=8, cond_channels=4)
    ys = stack_batch([build_condition(np.asarray(x0[0, 0, ::8, ::8], dtype=np.float64),
                                      np.ones((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), 4)], torch.float64)[1]
    xs = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    f64 = _perturbed_flow(small, torch.float64, torch.randn(4, 1, 8, 8, dtype=torch.float64), ys.repeat(4))
    _, logdet, _, _ = f64(xs, ys)
    jac = torch.autograd.functional.jacobian(lambda v: f64(v.view(1, 1, 8, 8), ys)[0].flatten(), xs.flatten())
    dense = float(torch.linalg.slogdet(jac)[1])
    logdet_err = abs(float(logdet.detach()) - dense) / abs(dense)
    elapsed = time.perf_counter() - t0

    ok = round_trip < 1e-4 and logdet_err < 1e-4 and elapsed < 60
    report(1, ok, f"round-trip max |err| {round_trip:.2e} on 100 phantoms (32-bit), log-det rel err "
                  f"{logdet_err:.2e} on 64 elements, {elapsed:.1f} s")
    assert ok


# --------------------------------------------------------------------- 2

def test_02_gradient_suite():
    t0 = time.perf_counter()
    worst = gradient_suite.run_all()
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < gradient_suite.TOL and elapsed < 300
    report(2, ok, f"{len(worst)} layer types, worst rel err {err:.2e} ({name}), {elapsed:.1f} s")
    assert ok


# --------------------------------------------------------------------- 3

def _forward_mc(k, n=200_000, x0=0.4, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.full((n,), x0, dtype=torch.float64)
    for t in range(1, k + 1):
        x = forward_step(x, t, torch.from_numpy(rng.standard_normal(n)), SCHED)
    g = SCHED.gamma[k]
    mean_dev = abs(x.mean().item() - math.sqrt(g) * x0) / math.sqrt((1 - g) / n)
    var_dev = abs(x.var().item() - (1 - g)) / ((1 - g) * math.sqrt(2 / (n - 1)))
    return max(mean_dev, var_dev)


def test_03_schedule_and_sampler_oracles():
    devs = {k: _forward_mc(k) for k in (1, 5, 50)}
    ok_a = all(d < 3 for d in devs.values())

    torch.manual_seed(0)
    net = Denoiser(DenoiserConfig(image_size=16, **TINY_DENOISER))
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn_like(p))
    y = make_batch(_tiny_dataset(), [(0, 0), (1, 2)], [8, 8])[1]
    full = sample(SampleConfig("ddpm", seed=11), y, SCHED, net).x0_hat
    respaced = sample(SampleConfig("respace", step_budget=1000, seed=11), y, SCHED, net).x0_hat
    ok_b = torch.equal(full, respaced)

    e = solver_errors(SCHED, SCHED.T, [10, 40, 160, 320], m=0.0, v=1.0)
    order = empirical_order(e[0], e[1], 10, 40)
    asym = empirical_order(e[2], e[3], 160, 320)
    et = solver_errors(SCHED, PROTOCOL.T_trunc, [10, 40], m=0.0, v=1.0)
    order_trunc = empirical_order(et[0], et[1], 10, 40)
    ok_c = order >= 1.5

    detail = (f"(a) max deviation {max(devs.values()):.2f} SE over k=1,5,50 [{'ok' if ok_a else 'bad'}]; "
              f"(b) stride-1 respacing bitwise equal: {ok_b}; "
              f"(c) order 10->40 steps on t=1000..1: {order:.2f} [{'ok' if ok_c else 'bad'}] "
              f"(errors {e[0]:.2e}, {e[1]:.2e}; order 160->320 {asym:.2f}; from t={PROTOCOL.T_trunc}: "
              f"{order_trunc:.2f})")
    ok = ok_a and ok_b and ok_c
    report(3, ok, detail)
    assert ok


_TINY = {}


def _tiny_dataset():
    if "ds" not in _TINY:
        from ftddm.phantom import generate_dataset
        root = WORKDIR / "tiny16"
        if not (root / "manifest.json").exists():
            generate_dataset(root, 2, seed=3, n_slices=2, size=16)
        _TINY["ds"] = load_dataset(root)
    return _TINY["ds"]


# --------------------------------------------------------------------- 4

def test_04_nfe_accounting():
    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(image_size=16, **TINY_DENOISER))
    flow = ConditionalFlow(FlowConfig(image_size=16, scales=2, steps_per_scale=1, hidden=8, cond_channels=4))
    flow.mark_initialized()
    y = make_batch(_tiny_dataset(), [(0, 0)], [8])[1]
    cases = [("DDPM(T=1000)", SampleConfig("ddpm"), 1000),
             ("respace(100)", SampleConfig("respace", step_budget=100), 100),
             ("FTDDM(T_trunc=100)", SampleConfig("ftddm", T_trunc=100), 101),
             ("FTDDM+solver(10)", SampleConfig("ftddm+solver", T_trunc=100, step_budget=10), 11)]
    got = {name: sample(cfg, y, SCHED, den, flow).nfe for name, cfg, _ in cases}
    ok = all(got[name] == want == expected_nfe(cfg) for name, cfg, want in cases)
    report(4, ok, ", ".join(f"{k} -> {v}" for k, v in got.items()))
    assert ok


# --------------------------------------------------------------------- 5

def test_05_ftddm_beats_respaced_ddpm(models, dataset, pairs):
    # The plain reverse step diverges for the respaced baseline: near t = T the
    # implied clean image amplifies noise-prediction error by up to 2e4. The
    # comparison is therefore required both as stated and with the clean-image
    # estimate clamped to [0, 1] in both arms, so a diverged baseline alone
    # cannot carry the result.
    L = int(dataset.size / S_EVAL)
    t0 = time.perf_counter()
    rows, ok = {}, len(pairs) >= 100
    for label, clip in (("plain", None), ("clipped", (0.0, 1.0))):
        ft, ft_res = evaluate(models, dataset, pairs, L, SampleConfig("ftddm", T_trunc=PROTOCOL.T_trunc, clip_x0=clip),
                              batch_size=BATCH)
        rs, rs_res = evaluate(models, dataset, pairs, L, SampleConfig("respace", step_budget=100, clip_x0=clip),
                              batch_size=BATCH)
        w = metrics.wilcoxon_signed_rank(ft["ssim"], rs["ssim"])
        a, b = float(np.mean(ft["ssim"])), float(np.mean(rs["ssim"]))
        rows[label] = {"ssim_ftddm": a, "ssim_respace": b, "p": w.p_value, "method": w.method,
                       "psnr_ftddm": float(np.mean(ft["psnr"])), "psnr_respace": float(np.mean(rs["psnr"])),
                       "nfe": [ft_res.nfe, rs_res.nfe]}
        ok = ok and a >= b and w.p_value < 0.05
    eval_time = time.perf_counter() - t0
    total = sum(models.timings.values()) + eval_time
    ok = ok and total < 7200
    _save("criterion_05.json", {"n": len(pairs), **rows, "eval_seconds": eval_time, "train_seconds": models.timings})
    parts = "; ".join(f"{k}: {v['ssim_ftddm']:.4f} vs {v['ssim_respace']:.4f} (p={v['p']:.1e})" for k, v in rows.items())
    report(5, ok, f"n={len(pairs)} at s={S_EVAL:g}, mean SSIM FTDDM(100) vs respace(100), Wilcoxon p: {parts}; "
                  f"runtime {total / 60:.1f} min incl. training")
    assert ok


def _save(name, obj):
    (WORKDIR / "results").mkdir(parents=True, exist_ok=True)
    (WORKDIR / "results" / name).write_text(json.dumps(obj, indent=2, default=float) + "\n")


# --------------------------------------------------------------------- 6

def _flow_only_checkpoint(data_dir):
    run_dir = WORKDIR / "flow_t0"
    cfg = replace(PROTOCOL, iterations=FLOW_ONLY_ITERATIONS).train_config(run_dir, data_dir, 0).to_dict()
    ckpt = run_dir / "flow_best.ckpt"
    cfg_path = WORKDIR / "flow_t0.json"
    if not (ckpt.exists() and (run_dir / "config.json").exists()
            and json.loads((run_dir / "config.json").read_text()) == json.loads(json.dumps(cfg))):
        cfg_path.write_text(json.dumps(cfg))
        assert cli_main(["train", "--model", "flow", "--config", str(cfg_path)]) == 0
    return ckpt


def _valid_run(out):
    """Outputs exist, are finite and are exactly zero outside the mask."""
    run = json.loads((out / "run.json").read_text())
    preds = sorted((out / "pred").glob("*.bin"))
    refs = sorted((out / "ref").glob("*.bin"))
    ok, peak = len(preds) == run["n"] > 0, 0.0
    for p, r in zip(preds, refs):
        x, m = read_slice(p)[0], read_slice(r)[1]
        ok &= bool(np.isfinite(x).all() and (x[m == 0] == 0).all())
        peak = max(peak, float(np.abs(x).max()))
    return ok, run, peak


def test_06_truncation_extremes_through_cli(models):
    data = WORKDIR / "data"
    flow0 = _flow_only_checkpoint(data)
    ddpm = str(WORKDIR / "ddpm_denoiser" / "denoiser_best.ckpt")
    common = ["sample", "--data", str(data), "--method", "ftddm", "--n", "2", "--s", f"{S_EVAL:g}"]
    runs = {"T_trunc=0": common + ["--t-trunc", "0", "--flow", str(flow0)],
            f"T_trunc={PROTOCOL.T}": common + ["--t-trunc", str(PROTOCOL.T), "--denoiser", ddpm],
            f"T_trunc={PROTOCOL.T} clipped": common + ["--t-trunc", str(PROTOCOL.T), "--denoiser", ddpm, "--clip-x0"]}
    want = {"T_trunc=0": 1, f"T_trunc={PROTOCOL.T}": PROTOCOL.T, f"T_trunc={PROTOCOL.T} clipped": PROTOCOL.T}
    ok, parts = True, []
    for i, (label, argv) in enumerate(runs.items()):
        out = WORKDIR / "results" / f"criterion_06_{i}"
        code = cli_main(argv + ["--out", str(out)])
        valid, run, peak = _valid_run(out) if code == 0 else (False, {"nfe": None}, float("nan"))
        ok = ok and valid and run["nfe"] == want[label]
        parts.append(f"{label}: exit {code}, NFE {run['nfe']}, finite+masked={valid}, max|x| {peak:.3g}")
    report(6, ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------- 7

def test_07_temperature(models, dataset, pairs):
    L = int(dataset.size / S_EVAL)
    chosen = [pairs[0], pairs[len(pairs) // 2]]
    _, y = make_batch(dataset, chosen, [L] * len(chosen))
    base = SampleConfig("ftddm", T_trunc=PROTOCOL.T_trunc)
    stds = []
    for tau in (0.0, 0.5, 0.9):
        umap = metrics.uncertainty_map(lambda yy, c: run_method(models, c, yy, BATCH), y, replace(base, tau_d=tau),
                                       n=50)
        m = y.mask.numpy()[:, 0] > 0.5
        stds.append(float(np.mean([u[mm].mean() for u, mm in zip(umap, m)])))
    monotone = all(b >= a for a, b in zip(stds, stds[1:]))
    s0 = float(np.mean(evaluate(models, dataset, pairs, L, replace(base, tau_d=0.0), batch_size=BATCH)[0]["ssim"]))
    s1 = float(np.mean(evaluate(models, dataset, pairs, L, replace(base, tau_d=1.0), batch_size=BATCH)[0]["ssim"]))
    ok = monotone and s0 >= s1
    _save("criterion_07.json", {"tau_d": [0.0, 0.5, 0.9], "mean_std": stds, "ssim_tau0": s0, "ssim_tau1": s1})
    report(7, ok, f"mean in-mask std over 50 samples at tau_d=0/0.5/0.9: "
                  f"{stds[0]:.4f}/{stds[1]:.4f}/{stds[2]:.4f}; SSIM tau_d=0 {s0:.4f} vs tau_d=1 {s1:.4f} "
                  f"(n={len(pairs)})")
    assert ok


# --------------------------------------------------------------------- 8

def test_08_matched_condition_maximises_ssim(models, dataset, pairs):
    grid = (2.0, 4.0, 8.0)
    cfg = SampleConfig("ftddm", T_trunc=PROTOCOL.T_trunc)
    table = {}
    for actual in grid:
        L = int(dataset.size / actual)
        for cond in grid:
            table[(actual, cond)] = float(np.mean(evaluate(models, dataset, pairs, L, cfg, conditioned_s=cond,
                                                           batch_size=BATCH)[0]["ssim"]))
    best = {a: max(grid, key=lambda c: table[(a, c)]) for a in grid}
    ok = all(best[a] == a for a in grid)
    _save("criterion_08.json", {f"{a:g}->{c:g}": v for (a, c), v in table.items()})
    rows = "; ".join(f"actual {a:g}: " + "/".join(f"{table[(a, c)]:.4f}" for c in grid) for a in grid)
    report(8, ok, f"SSIM at conditioned s=2/4/8 (n={len(pairs)}) {rows}; argmax {best}")
    assert ok


# --------------------------------------------------------------------- 9

def test_09_metric_oracles():
    worst = 0.0
    for a, b, m in oracle.fixed_cases():
        arr = [np.array(v) for v in (a, b, m)]
        worst = max(worst, abs(metrics.ssim(*arr) - oracle.ssim(a, b, m)),
                    abs(metrics.msssim(*arr) - oracle.msssim(a, b, m, 2)))
    gaps = oracle.wilcoxon_gaps(range(10, 21), metrics.wilcoxon_normal_p, metrics.wilcoxon_exact_p)
    n_worst = max(gaps, key=gaps.get)
    ok_ssim = worst < 1e-8
    ok_w = gaps[n_worst] < 0.005
    report(9, ok_ssim and ok_w, f"SSIM/MS-SSIM vs scalar loop max |diff| {worst:.1e} "
                                f"[{'ok' if ok_ssim else 'bad'}]; Wilcoxon normal vs exact max |dp| "
                                f"{gaps[n_worst]:.4f} at n={n_worst} (n=10..20, every T+) "
                                f"[{'ok' if ok_w else 'bad'}]")
    assert ok_ssim and ok_w


# -------------------------------------------------------------------- 10

def test_10_degradation_identities():
    ph = generate_phantom(PhantomSpec(seed=5, size=64))
    x = ph.maps["NAA"]
    identity = float(np.abs(kspace_truncate(x, 64)[1] - x).max())
    idem = 0.0
    for L in LR_SIZES:
        once = kspace_truncate(x, L)[1]
        idem = max(idem, float(np.abs(kspace_truncate(once, L)[1] - once).max()))
    mapping = {L: upscaling_factor(64, L) for L in (32, 16, 8)}
    ok = identity < 1e-12 and idem < 1e-12 and mapping[16] == 4.0 and mapping == {32: 2.0, 16: 4.0, 8: 8.0}
    report(10, ok, f"L=H identity max |err| {identity:.1e}; idempotence max |err| {idem:.1e} over "
                   f"L={LR_SIZES[0]}..{LR_SIZES[-1]}; s mapping {mapping}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))

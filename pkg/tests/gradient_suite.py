"""Finite-difference gradient checks for every trainable layer type.

Each case returns ``(fn, params)`` where ``fn()`` is a scalar in float64. The
scalar is a random projection of the layer output so no coordinate of the
gradient cancels by symmetry. Zero-initialised weights are randomised first.
"""
import torch

from ftddm import numerics as nx
from ftddm.denoiser import (CIN, AttentionBlock, ConditioningMLP, ConditionStack, Denoiser, DenoiserConfig,
                            Downsample, ResBlock, Upsample, diffusion_loss)
from ftddm.flow import (ActNorm, AffineInjector, ConditionalCoupling, ConditionalFlow, ConditionNet, FlowConfig,
                        FlowStep, flow_loss, nll_loss)
from ftddm.schedule import build_cosine_schedule

TOL = 1e-4
N_COORDS = 40
F64 = torch.float64


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _rand(*shape, seed=0, scale=1.0):
    return torch.randn(*shape, generator=_gen(seed), dtype=F64) * scale


def _prep(module, scale=0.3, seed=1):
    module = module.double()
    g = _gen(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "scale" in name:
                p.copy_(1.0 + 0.2 * torch.rand(p.shape, generator=g, dtype=F64))
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=F64) * scale)
    for m in module.modules():
        if isinstance(m, ActNorm):
            m.mark_initialized()
    return module


def _project(out, seed=99):
    r = torch.randn(out.shape, generator=_gen(seed), dtype=F64)
    return (out * r).sum()


def _stack(b=2, size=16, seed=5):
    g = _gen(seed)
    mask = torch.zeros(b, 1, size, size, dtype=F64)
    mask[..., 2:-2, 3:-3] = 1
    rnd = lambda: torch.rand(b, 1, size, size, generator=g, dtype=F64)
    return ConditionStack(rnd() * mask, mask, rnd(), rnd(), torch.tensor([2.0, 4.0])[:b])


def _case(module, forward):
    module = _prep(module)
    return (lambda: _project(forward(module))), list(module.named_parameters())


def conditioning_mlp():
    return _case(ConditioningMLP(8, 12), lambda m: m(torch.tensor([3, 400]), torch.tensor([2.0, 8.0])))


def cin():
    f, emb = _rand(2, 3, 6, 6, seed=2), _rand(2, 12, seed=3)
    return _case(CIN(3, 12), lambda m: m(f, emb))


def resblock():
    f, emb = _rand(2, 4, 6, 6, seed=2), _rand(2, 12, seed=3)
    return _case(ResBlock(4, 6, 12), lambda m: m(f, emb))


def attention():
    f = _rand(1, 4, 4, 4, seed=2)
    return _case(AttentionBlock(4, 2), lambda m: m(f))


def downsample():
    f = _rand(1, 3, 6, 6, seed=2)
    return _case(Downsample(3), lambda m: m(f))


def upsample():
    f = _rand(1, 3, 3, 3, seed=2)
    return _case(Upsample(3), lambda m: m(f))


def denoiser():
    cfg = DenoiserConfig(image_size=16, channels=(8, 8), blocks_per_stage=1, attention_resolutions=(8,),
                         attention_heads=2, time_embed_dim=8, embed_width=16)
    net = _prep(Denoiser(cfg))
    y = _stack()
    x0 = torch.rand(2, 1, 16, 16, generator=_gen(7), dtype=F64) * y.mask
    eps = _rand(2, 1, 16, 16, seed=8)
    sched = build_cosine_schedule(1000)
    t = torch.tensor([4, 60])
    return (lambda: diffusion_loss(net, x0, y, sched, 100, eps=eps, t=t)), list(net.named_parameters())


def actnorm():
    x = _rand(2, 4, 4, 4, seed=2)
    return _case(ActNorm(4), lambda m: _sum_both(m(x)))


def invconv():
    from ftddm.flow import InvConv1x1
    x = _rand(2, 4, 4, 4, seed=2)
    m = InvConv1x1(4).double()
    with torch.no_grad():
        m.weight.add_(0.1 * _rand(4, 4, seed=4))
    return (lambda: _project(_sum_both(m(x)))), list(m.named_parameters())


def injector():
    x, c = _rand(2, 4, 4, 4, seed=2), _rand(2, 3, 4, 4, seed=3)
    return _case(AffineInjector(4, 3, 6), lambda m: _sum_both(m(x, c)))


def coupling():
    x, c = _rand(2, 4, 4, 4, seed=2), _rand(2, 3, 4, 4, seed=3)
    return _case(ConditionalCoupling(4, 3, 6), lambda m: _sum_both(m(x, c)))


def flow_step():
    x, c = _rand(2, 4, 4, 4, seed=2), _rand(2, 3, 4, 4, seed=3)
    return _case(FlowStep(4, 3, 6), lambda m: _sum_both(m(x, c)))


def condition_net():
    c = _rand(2, 5, 8, 8, seed=2)
    return _case(ConditionNet(5, 4, 2), lambda m: torch.cat([f.flatten(1) for f in m(c)], dim=1))


def flow_nll():
    flow = _prep(ConditionalFlow(FlowConfig(image_size=16, scales=2, steps_per_scale=1, hidden=6, cond_channels=4)),
                 scale=0.2)
    y = _stack()
    x = _rand(2, 1, 16, 16, seed=9, scale=0.5)

    def fn():
        z, ld, mu, sigma = flow(x, y)
        return nll_loss(z, ld, mu, sigma, reduce="per_dim")
    return fn, list(flow.named_parameters())


def flow_full_loss():
    flow = _prep(ConditionalFlow(FlowConfig(image_size=16, scales=2, steps_per_scale=1, hidden=6, cond_channels=4)),
                 scale=0.2)
    y = _stack()
    x = _rand(2, 1, 16, 16, seed=9, scale=0.5)
    x0 = torch.rand(2, 1, 16, 16, generator=_gen(10), dtype=F64) * y.mask
    return (lambda: flow_loss(flow, x, x0, y)[0]), list(flow.named_parameters())


def _sum_both(pair):
    out, logdet = pair
    return torch.cat([out.flatten(), logdet.flatten() * 0.1])


CASES = {
    "conditioning_mlp": conditioning_mlp,
    "cin": cin,
    "resblock": resblock,
    "attention": attention,
    "downsample": downsample,
    "upsample": upsample,
    "denoiser_loss": denoiser,
    "actnorm": actnorm,
    "invconv1x1": invconv,
    "affine_injector": injector,
    "coupling": coupling,
    "flow_step": flow_step,
    "condition_net": condition_net,
    "flow_nll": flow_nll,
    "flow_loss": flow_full_loss,
}


def check(name, n_coords=N_COORDS):
    fn, params = CASES[name]()
    res = nx.finite_difference_check(fn, params, n_coords=n_coords)
    return max(r[-1] for r in res)


def run_all(n_coords=N_COORDS):
    return {name: check(name, n_coords) for name in CASES}

"""Conditional noise-prediction UNet with Conditional Instance Normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

from . import numerics as nx
from .schedule import NoiseSchedule, forward_marginal


@dataclass
class ConditionStack:
    """Condition images (B, 1, H, W) and per-sample upscaling factor (B,)."""

    lr: torch.Tensor
    mask: torch.Tensor
    t1: torch.Tensor
    flair: torch.Tensor
    s: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(x.shape) for x in (self.lr, self.mask, self.t1, self.flair)}
        if len(shapes) != 1:
            raise nx.ShapeError("ConditionStack", *shapes, detail="all channels must share B x 1 x H x W")
        self.s = torch.as_tensor(self.s, dtype=self.lr.dtype).reshape(-1).expand(self.lr.shape[0]).clone()

    def channels(self, use_mask=True, use_mri=True):
        parts = [self.lr]
        if use_mask:
            parts.append(self.mask)
        if use_mri:
            parts += [self.t1, self.flair]
        return torch.cat(parts, dim=1)

    def with_s(self, s):
        return ConditionStack(self.lr, self.mask, self.t1, self.flair, s)

    def to(self, dtype):
        return ConditionStack(self.lr.to(dtype), self.mask.to(dtype), self.t1.to(dtype),
                              self.flair.to(dtype), self.s.to(dtype))

    def index(self, idx):
        return ConditionStack(self.lr[idx], self.mask[idx], self.t1[idx], self.flair[idx], self.s[idx])

    def repeat(self, n):
        """Each sample repeated n times consecutively."""
        rep = lambda x: x.repeat_interleave(n, dim=0)
        return ConditionStack(rep(self.lr), rep(self.mask), rep(self.t1), rep(self.flair), rep(self.s))

    @property
    def batch(self):
        return self.lr.shape[0]


def condition_channel_count(use_mask=True, use_mri=True):
    return 1 + int(use_mask) + 2 * int(use_mri)


@dataclass
class DenoiserConfig:
    image_size: int = 64
    channels: tuple = (32, 48, 64)
    blocks_per_stage: int = 2
    attention_resolutions: tuple = (16, 8)
    attention_heads: int = 4
    time_embed_dim: int = 64
    embed_width: int = 128
    use_mask: bool = True
    use_mri: bool = True
    stages: int = field(default=None)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if self.stages is None:
            self.stages = len(self.channels)
        if len(self.channels) != self.stages:
            raise ValueError(f"channels has {len(self.channels)} entries but stages = {self.stages}")
        for r in self.attention_resolutions:
            if self.image_size % r:
                raise ValueError(f"attention resolution {r} does not divide image size {self.image_size}")
        if self.image_size % (2 ** self.stages):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{self.stages}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @classmethod
    def full_scale(cls):
        """Full-size topology: four stages of 64/128/192/256 channels, three blocks each."""
        return cls(channels=(64, 128, 192, 256), blocks_per_stage=3, attention_resolutions=(16, 8),
                   time_embed_dim=128, embed_width=512)

    def to_dict(self):
        return asdict(self)


def sinusoidal_embed(t, dim, max_period=10000.0):
    """Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with geometric w_i."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) * 2 / dim)
    args = t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], dim)
    return emb


def cin_modulate(f, sigma_hat, mu_hat, eps=nx.INSTANCE_EPS):
    """f' = sigma_hat * (f - mean(f)) / std(f) + mu_hat, per sample and channel."""
    return torch.addcmul(mu_hat, sigma_hat, nx.instance_normalize(f, eps))


def cin_demodulate(f_mod, mean, std, sigma_hat, mu_hat):
    """Invert :func:`cin_modulate` given the statistics used in the forward pass."""
    return (f_mod - mu_hat) / sigma_hat * std + mean


class ConditioningMLP(nn.Module):
    """(t, s) -> embedding: 4 fully-connected layers with SiLU in between."""

    def __init__(self, time_dim, width, s_norm=8.0):
        super().__init__()
        self.time_dim = time_dim
        self.s_norm = s_norm
        dims = [time_dim + 1, width, width, width, width]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, t, s):
        dtype = self.layers[0].weight.dtype
        h = torch.cat([sinusoidal_embed(t, self.time_dim).to(dtype),
                       (torch.as_tensor(s, dtype=dtype).reshape(-1, 1) / self.s_norm)], dim=1)
        for i, layer in enumerate(self.layers):
            h = nx.linear(h, layer.weight, layer.bias)
            if i < len(self.layers) - 1:
                h = nx.silu(h)
        return h


class CIN(nn.Module):
    def __init__(self, channels, embed_width):
        super().__init__()
        self.proj = nn.Linear(embed_width, 2 * channels)

    def forward(self, f, emb):
        p = nx.linear(nx.silu(emb), self.proj.weight, self.proj.bias)
        scale, shift = p[:, :, None, None].chunk(2, dim=1)
        return cin_modulate(f, 1.0 + scale, shift)


class Conv(nn.Conv2d):
    def forward(self, x):
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride[0])


class ResBlock(nn.Module):
    def __init__(self, cin, cout, embed_width):
        super().__init__()
        self.norm1 = CIN(cin, embed_width)
        self.conv1 = Conv(cin, cout, 3, padding=1)
        self.norm2 = CIN(cout, embed_width)
        self.conv2 = Conv(cout, cout, 3, padding=1)
        self.skip = Conv(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(nx.silu(self.norm1(x, emb)))
        h = self.conv2(nx.silu(self.norm2(h, emb)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(nn.Module):
    def __init__(self, channels, heads):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Conv(channels, 3 * channels, 1)
        self.proj = Conv(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(nx.instance_normalize(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = (qkv[:, i].transpose(-1, -2) for i in range(3))
        out = nx.attention(q, k, v).transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = Conv(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = Conv(channels, channels, 3, padding=1)

    def forward(self, x):
        return nx.upsample_conv(x, self.conv.weight, self.conv.bias)


class Denoiser(nn.Module):
    """UNet predicting the noise in x_t from (y, x_t, t, s)."""

    def __init__(self, config: DenoiserConfig = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        ew = cfg.embed_width
        self.embed = ConditioningMLP(cfg.time_embed_dim, ew)
        in_ch = 1 + condition_channel_count(cfg.use_mask, cfg.use_mri)
        ch = cfg.channels
        self.inp = Conv(in_ch, ch[0], 3, padding=1)

        self.down = nn.ModuleList()
        skips = [ch[0]]
        cur = ch[0]
        res = cfg.image_size
        for i, c in enumerate(ch):
            for _ in range(cfg.blocks_per_stage):
                layers = nn.ModuleList([ResBlock(cur, c, ew)])
                cur = c
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(cur, cfg.attention_heads))
                self.down.append(layers)
                skips.append(cur)
            self.down.append(nn.ModuleList([Downsample(cur)]))
            skips.append(cur)
            res //= 2
        skips.pop()  # the deepest downsample feeds the middle block only

        self.mid = nn.ModuleList([ResBlock(cur, cur, ew)])
        if res in cfg.attention_resolutions:
            self.mid.append(AttentionBlock(cur, cfg.attention_heads))
        self.mid.append(ResBlock(cur, cur, ew))

        self.up = nn.ModuleList()
        for i, c in reversed(list(enumerate(ch))):
            res *= 2
            self.up.append(nn.ModuleList([Upsample(cur)]))
            for _ in range(cfg.blocks_per_stage + 1):
                layers = nn.ModuleList([ResBlock(cur + skips.pop(), c, ew)])
                cur = c
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(cur, cfg.attention_heads))
                self.up.append(layers)
        self.out_norm = CIN(cur, ew)
        self.out = Conv(cur, 1, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _run(self, layers, h, emb):
        for layer in layers:
            h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
        return h

    def forward(self, x_t, cond_channels, t, s):
        emb = self.embed(t, s)
        h = self.inp(torch.cat([x_t, cond_channels], dim=1))
        hs = [h]
        for layers in self.down:
            h = self._run(layers, h, emb)
            hs.append(h)
        hs.pop()
        h = self._run(self.mid, h, emb)
        for layers in self.up:
            if isinstance(layers[0], Upsample):
                h = layers[0](h)
                continue
            h = self._run(layers, torch.cat([h, hs.pop()], dim=1), emb)
        return self.out(nx.silu(self.out_norm(h, emb)))

    def predict_noise(self, y: ConditionStack, x_t, t, s=None):
        """eps_hat(y, x_t, t, s), masked by y.mask. ``s`` defaults to y.s."""
        if x_t.shape != y.lr.shape:
            raise nx.ShapeError("predict_noise", x_t.shape, y.lr.shape)
        s = y.s if s is None else s
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        cond = y.channels(self.config.use_mask, self.config.use_mri)
        return self.forward(x_t, cond, t, s) * y.mask


def sample_timesteps(seed, iteration, batch, T_trunc):
    """t ~ U{1..T_trunc} for one training batch."""
    return torch.from_numpy(nx.stream(seed, "train-t", iteration).integers(1, T_trunc + 1, size=batch))


def diffusion_loss(model, x0, y: ConditionStack, sched: NoiseSchedule, T_trunc: int, rng_seed=0, iteration=0,
                   eps=None, t=None):
    """Masked mean of ||eps - eps_theta(y, x_t, t, s)||^2 with t ~ U{1..T_trunc}.

    ``model`` is anything with ``predict_noise``. ``eps``/``t`` may be given
    explicitly, otherwise they are drawn from the (seed, iteration) streams.
    """
    if x0.shape[0] == 0:
        raise ValueError("diffusion_loss: empty batch")
    if not 1 <= T_trunc <= sched.T:
        raise ValueError(f"T_trunc must be in [1, {sched.T}]")
    b = x0.shape[0]
    if t is None:
        t = sample_timesteps(rng_seed, iteration, b, T_trunc)
    if eps is None:
        eps = nx.normal(rng_seed, "train-eps", iteration, tuple(x0.shape), dtype=x0.dtype)
    x_t = forward_marginal(x0, t, eps, sched, y.mask)
    eps_hat = model.predict_noise(y, x_t, t)
    err = ((eps - eps_hat) ** 2) * y.mask
    return err.sum() / y.mask.sum().clamp_min(1.0)

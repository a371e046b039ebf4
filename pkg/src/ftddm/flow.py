"""Conditional normalizing flow generating the noisy image at the truncation point.

Layout: squeeze -> K flow steps -> squeeze -> K flow steps, each step being
actnorm -> invertible 1x1 conv -> affine injector -> conditional affine
coupling. Condition networks (conv + LeakyReLU) turn the condition stack
into features at each flow resolution; a head on the deepest features
emits the mean and std of the Gaussian latent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from . import numerics as nx
from .denoiser import ConditionStack, condition_channel_count
from .metrics import msssim_torch

ALPHA = 0.84
LAMBDA_GUIDE = 10.0
SCALE_CLAMP = 3.0


class FlowNotInitializedError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    image_size: int = 64
    scales: int = 2
    steps_per_scale: int = 4
    hidden: int = 32
    cond_channels: int = 16
    use_mask: bool = True
    use_mri: bool = True
    condition_on_s: bool = True
    identity_init: bool = False
    guide_target_scaled: bool = False

    def __post_init__(self):
        if self.image_size % (2 ** self.scales):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{self.scales}")

    def to_dict(self):
        return asdict(self)


def _soft_clamp(s):
    return SCALE_CLAMP * torch.tanh(s / SCALE_CLAMP)


def _zero_conv(cin, cout, k=3):
    conv = nn.Conv2d(cin, cout, k, padding=k // 2)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _conv(conv, x):
    return nx.conv2d(x, conv.weight, conv.bias)


class ActNorm(nn.Module):
    """y = a * x + b per channel, data-initialised on the first training batch."""

    def __init__(self, channels):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(0.0))

    @torch.no_grad()
    def initialize(self, x):
        mean = x.mean(dim=(0, 2, 3), keepdim=True)
        std = x.std(dim=(0, 2, 3), keepdim=True, unbiased=False)
        self.scale.copy_(1.0 / (std + 1e-6))
        self.bias.copy_(-mean / (std + 1e-6))
        self.initialized.fill_(1.0)

    def mark_initialized(self):
        self.initialized.fill_(1.0)

    def _check(self):
        if not self.initialized.item():
            raise FlowNotInitializedError("actnorm used before data-dependent initialisation")
        if (self.scale == 0).any():
            raise ValueError("actnorm scale has a zero entry; layer is not invertible")

    def forward(self, x, cond=None):
        if not self.initialized.item() and self.training:
            self.initialize(x)
        self._check()
        logdet = x.shape[2] * x.shape[3] * torch.log(self.scale.abs()).sum()
        return self.scale * x + self.bias, logdet.expand(x.shape[0])

    def inverse(self, y, cond=None):
        self._check()
        return (y - self.bias) / self.scale


class InvConv1x1(nn.Module):
    def __init__(self, channels, identity=False):
        super().__init__()
        if identity:
            w = torch.eye(channels)
        else:
            w = torch.linalg.qr(torch.randn(channels, channels))[0].contiguous()
        self.weight = nn.Parameter(w)

    def _logabsdet(self):
        sign, logabs = torch.linalg.slogdet(self.weight)
        if sign == 0 or logabs < math.log(1e-12):
            raise ValueError("1x1 conv matrix is (near) singular: |det W| < 1e-12")
        return logabs

    def forward(self, x, cond=None):
        logdet = x.shape[2] * x.shape[3] * self._logabsdet()
        y = nx.conv2d(x, self.weight[:, :, None, None], padding=0)
        return y, logdet.expand(x.shape[0])

    def inverse(self, y, cond=None):
        self._logabsdet()
        w_inv = torch.linalg.inv(self.weight)
        return nx.conv2d(y, w_inv[:, :, None, None], padding=0)


class AffineInjector(nn.Module):
    """y = x * exp(s(cond)) + t(cond) on all channels."""

    def __init__(self, channels, cond_channels, hidden):
        super().__init__()
        self.conv1 = nn.Conv2d(cond_channels, hidden, 3, padding=1)
        self.conv2 = _zero_conv(hidden, 2 * channels)

    def params(self, cond):
        h = _conv(self.conv2, nx.leaky_relu(_conv(self.conv1, cond)))
        s, t = h.chunk(2, dim=1)
        return _soft_clamp(s), t

    def forward(self, x, cond):
        s, t = self.params(cond)
        return x * torch.exp(s) + t, s.sum(dim=(1, 2, 3))

    def inverse(self, y, cond):
        s, t = self.params(cond)
        return (y - t) * torch.exp(-s)


class ConditionalCoupling(nn.Module):
    """y_b = x_b * exp(s(x_a, cond)) + t(x_a, cond); y_a = x_a."""

    def __init__(self, channels, cond_channels, hidden):
        super().__init__()
        self.split = channels // 2
        self.conv1 = nn.Conv2d(self.split + cond_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 1)
        self.conv3 = _zero_conv(hidden, 2 * (channels - self.split))

    def params(self, xa, cond):
        h = nx.leaky_relu(_conv(self.conv1, nx.concat([xa, cond])))
        h = nx.leaky_relu(_conv(self.conv2, h))
        s, t = _conv(self.conv3, h).chunk(2, dim=1)
        return _soft_clamp(s), t

    def forward(self, x, cond):
        xa, xb = x[:, :self.split], x[:, self.split:]
        s, t = self.params(xa, cond)
        return torch.cat([xa, xb * torch.exp(s) + t], dim=1), s.sum(dim=(1, 2, 3))

    def inverse(self, y, cond):
        ya, yb = y[:, :self.split], y[:, self.split:]
        s, t = self.params(ya, cond)
        return torch.cat([ya, (yb - t) * torch.exp(-s)], dim=1)


class FlowStep(nn.Module):
    def __init__(self, channels, cond_channels, hidden, identity=False):
        super().__init__()
        self.layers = nn.ModuleList([
            ActNorm(channels),
            InvConv1x1(channels, identity=identity),
            AffineInjector(channels, cond_channels, hidden),
            ConditionalCoupling(channels, cond_channels, hidden),
        ])

    def forward(self, x, cond):
        total = 0.0
        for layer in self.layers:
            x, ld = layer(x, cond)
            total = total + ld
        return x, total

    def inverse(self, y, cond):
        for layer in reversed(self.layers):
            y = layer.inverse(y, cond)
        return y


class ConditionNet(nn.Module):
    """Condition stack -> features at each flow resolution (conv + LeakyReLU)."""

    def __init__(self, in_channels, channels, scales):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.down = nn.ModuleList()
        self.refine = nn.ModuleList()
        for _ in range(scales):
            self.down.append(nn.Conv2d(channels, channels, 3, stride=2, padding=1))
            self.refine.append(nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, c):
        h = nx.leaky_relu(_conv(self.stem, c))
        feats = []
        for down, refine in zip(self.down, self.refine):
            h = nx.leaky_relu(nx.conv2d(h, down.weight, down.bias, stride=2, padding=1))
            h = nx.leaky_relu(_conv(refine, h))
            feats.append(h)
        return feats


class ConditionalFlow(nn.Module):
    def __init__(self, config: FlowConfig = None):
        super().__init__()
        cfg = config or FlowConfig()
        self.config = cfg
        cin = condition_channel_count(cfg.use_mask, cfg.use_mri) + int(cfg.condition_on_s)
        self.cond_net = ConditionNet(cin, cfg.cond_channels, cfg.scales)
        self.levels = nn.ModuleList()
        c = 1
        for _ in range(cfg.scales):
            c *= 4
            self.levels.append(nn.ModuleList(
                FlowStep(c, cfg.cond_channels, cfg.hidden, identity=cfg.identity_init)
                for _ in range(cfg.steps_per_scale)))
        self.latent_channels = c
        self.head1 = nn.Conv2d(cfg.cond_channels, cfg.hidden, 3, padding=1)
        self.head2 = _zero_conv(cfg.hidden, 2 * c)

    def condition_features(self, y: ConditionStack):
        c = y.channels(self.config.use_mask, self.config.use_mri)
        if self.config.condition_on_s:
            c = torch.cat([c, (y.s / 8.0).view(-1, 1, 1, 1).expand_as(y.lr).to(c.dtype)], dim=1)
        return self.cond_net(c)

    def prior(self, feats):
        h = _conv(self.head2, nx.leaky_relu(_conv(self.head1, feats[-1])))
        mu, log_sigma = h.chunk(2, dim=1)
        return mu, torch.exp(log_sigma)

    def mark_initialized(self):
        for m in self.modules():
            if isinstance(m, ActNorm):
                m.mark_initialized()

    def forward(self, x, y: ConditionStack):
        """x -> (z, total_logdet, mu_z, sigma_z)."""
        if x.shape != y.lr.shape:
            raise nx.ShapeError("flow_forward", x.shape, y.lr.shape)
        feats = self.condition_features(y)
        h = x
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for steps, feat in zip(self.levels, feats):
            h = nx.squeeze2d(h)
            for step in steps:
                h, ld = step(h, feat)
                logdet = logdet + ld
        mu, sigma = self.prior(feats)
        return h, logdet, mu, sigma

    def inverse(self, z, y: ConditionStack, feats=None):
        feats = self.condition_features(y) if feats is None else feats
        h = z
        for steps, feat in zip(reversed(self.levels), reversed(feats)):
            for step in reversed(steps):
                h = step.inverse(h, feat)
            h = nx.unsqueeze2d(h)
        return h

    def sample(self, y: ConditionStack, tau_f=0.9, noise=None):
        """x_hat = F^{-1}(mu + tau_f * sigma * noise, y), masked.

        ``noise`` is standard normal shaped like the latent; required when
        tau_f > 0.
        """
        if not 0.0 <= tau_f <= 1.0:
            raise ValueError("tau_f must lie in [0, 1]")
        feats = self.condition_features(y)
        mu, sigma = self.prior(feats)
        z = mu if tau_f == 0 or noise is None else mu + tau_f * sigma * noise
        if tau_f > 0 and noise is None:
            raise ValueError("noise is required when tau_f > 0")
        return self.inverse(z, y, feats) * y.mask

    def latent_shape(self, batch):
        n = self.config.image_size // 2 ** self.config.scales
        return (batch, self.latent_channels, n, n)


def flow_forward(flow, x_trunc, y):
    return flow(x_trunc, y)


def flow_inverse(flow, z, y, tau_f=None):
    """F^{-1}(z, y) masked by y.mask (``tau_f`` is unused when z is given)."""
    return flow.inverse(z, y) * y.mask


def nll_loss(z, total_logdet, mu_z, sigma_z, reduce="sum"):
    """-log p_z(z) - log|det J| per sample.

    reduce='sum' returns the per-sample NLL in nats; 'per_dim' divides it by
    the latent element count. The batch mean is taken in both cases.
    """
    if (sigma_z <= 0).any():
        raise ValueError("sigma_z must be strictly positive")
    dims = z[0].numel()
    log_pz = -0.5 * ((((z - mu_z) / sigma_z) ** 2).sum(dim=(1, 2, 3))
                     + torch.log(2 * math.pi * sigma_z ** 2).sum(dim=(1, 2, 3)))
    nll = -log_pz - total_logdet
    if reduce == "per_dim":
        nll = nll / dims
    return nll.mean()


def guide_loss(x0, x_hat, mask=None, alpha=ALPHA):
    """(1 - alpha) * masked L1 + alpha * (1 - masked MS-SSIM), batch mean."""
    if x0.shape != x_hat.shape:
        raise nx.ShapeError("guide_loss", x0.shape, x_hat.shape)
    m = torch.ones_like(x0) if mask is None else mask
    l1 = ((x0 - x_hat).abs() * m).sum(dim=(1, 2, 3)) / m.sum(dim=(1, 2, 3)).clamp_min(1.0)
    structural = 1.0 - msssim_torch(x0, x_hat, m)
    return ((1 - alpha) * l1 + alpha * structural).mean()


def flow_loss(flow, x_trunc, x0, y, lam=LAMBDA_GUIDE, alpha=ALPHA, guide_target=None):
    """NLL (per latent dimension) + lambda * guide loss. Returns (total, nll, guide)."""
    z, logdet, mu, sigma = flow(x_trunc, y)
    nll = nll_loss(z, logdet, mu, sigma, reduce="per_dim")
    if lam == 0:
        return nll, nll, torch.zeros((), dtype=nll.dtype)
    x_hat = flow.sample(y, tau_f=0.0)
    target = x0 if guide_target is None else guide_target
    g = guide_loss(target, x_hat, y.mask, alpha)
    return nll + lam * g, nll, g

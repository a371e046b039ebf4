"""Tensor operators, optimiser, RNG streams and checkpoint container.

Tensor storage and reverse-mode differentiation are delegated to torch. This
module pins down the operator set the denoiser and flow are built from, the
shape checks they perform, and the plumbing around training (Adam with a
non-finite guard, learning-rate decay, counter-based random streams and the
parameter checkpoint format).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

INSTANCE_EPS = 1e-5


class ShapeError(ValueError):
    """An operator received tensors with incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shapes_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shapes_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'; step aborted")
        self.name = name


def _need_rank(op, x, rank):
    if x.dim() != rank:
        raise ShapeError(op, x.shape, detail=f"expected rank {rank}")


# ---------------------------------------------------------------- operators

def conv2d(x, weight, bias=None, stride=1, padding=None):
    """2D convolution; ``padding=None`` means 'same' for odd kernels."""
    _need_rank("conv2d", x, 4)
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="input channels must match weight dim 1")
    if padding is None:
        padding = weight.shape[-1] // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def upsample_conv(x, weight, bias=None):
    """Nearest-neighbour 2x upsampling followed by a 'same' convolution."""
    _need_rank("upsample_conv", x, 4)
    return conv2d(F.interpolate(x, scale_factor=2, mode="nearest"), weight, bias)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def silu(x):
    return F.silu(x)


def leaky_relu(x, slope=0.2):
    return F.leaky_relu(x, slope)


def instance_stats(x, eps=INSTANCE_EPS):
    """Per-sample, per-channel mean and std over spatial positions.

    std is ``sqrt(var + eps)`` with the biased variance.
    """
    _need_rank("instance_stats", x, 4)
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("instance_stats", x.shape, detail="no spatial elements")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(2, 3), keepdim=True)
    return mean, torch.sqrt(var + eps)


def instance_normalize(x, eps=INSTANCE_EPS):
    """(x - mean) / sqrt(var + eps) per sample and channel (fused kernel)."""
    _need_rank("instance_normalize", x, 4)
    return F.instance_norm(x, eps=eps)


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


def attention(q, k, v):
    """Scaled dot-product attention. q, k, v: (batch, heads, positions, dim)."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax(torch.matmul(q, k.transpose(-1, -2)) * scale, dim=-1)
    return torch.matmul(weights, v)


def concat(tensors, dim=1):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != dim):
            raise ShapeError("concat", *(x.shape for x in tensors))
    return torch.cat(tensors, dim=dim)


def squeeze2d(x):
    """2x2 space-to-channel: (B, C, H, W) -> (B, 4C, H/2, W/2)."""
    _need_rank("squeeze2d", x, 4)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("squeeze2d", x.shape, detail="H and W must be even")
    x = x.reshape(b, c, h // 2, 2, w // 2, 2)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, 4 * c, h // 2, w // 2)


def unsqueeze2d(x):
    """Inverse of :func:`squeeze2d`."""
    _need_rank("unsqueeze2d", x, 4)
    b, c, h, w = x.shape
    if c % 4:
        raise ShapeError("unsqueeze2d", x.shape, detail="channels must be divisible by 4")
    x = x.reshape(b, c // 4, 2, 2, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c // 4, 2 * h, 2 * w)


# ----------------------------------------------------------------- autodiff

def backward(loss, params=None):
    """Accumulate d(loss)/d(param) into every reachable parameter's .grad.

    Parameters listed in ``params`` that the loss does not reach get an
    explicit zero gradient instead of none.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    for p in params or ():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def finite_difference_check(fn, params, n_coords=50, h=1e-5, seed=0):
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``params`` is a sequence of (name, tensor) with requires_grad set. Returns
    a list of (name, index, analytic, numeric, rel_err) over ``n_coords``
    randomly chosen coordinates. rel_err uses ``max(|a|, |n|, 1e-8)`` as the
    denominator so coordinates with a vanishing gradient are compared
    absolutely.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in params}

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in params], dtype=float)
    out = []
    for _ in range(n_coords):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        name, p = params[k]
        idx = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = fn().item()
            flat[idx] = orig - h
            down = fn().item()
            flat[idx] = orig
        num = (up - down) / (2 * h)
        ana = analytic[name].view(-1)[idx].item()
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        out.append((name, idx, ana, num, rel))
    return out


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction over a dict of named parameters.

    A non-finite gradient aborts the whole step before any parameter moves.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_index = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        self.step_index += 1
        adam_step(self.params, {n: p.grad for n, p in self.params.items()},
                  lr, self.beta1, self.beta2, self.eps, self.step_index, self.m, self.v)

    def state_dict(self):
        return {"step_index": self.step_index,
                "m": {k: v.clone() for k, v in self.m.items()},
                "v": {k: v.clone() for k, v in self.v.items()}}


@torch.no_grad()
def adam_step(params, grads, lr, beta1, beta2, eps, step_index, m, v):
    """One in-place Adam update. ``m`` and ``v`` hold the moment buffers."""
    if step_index < 1:
        raise ValueError("adam_step: step_index must be >= 1")
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
        m[name].mul_(beta1).add_(g, alpha=1 - beta1)
        v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v[name] / c2).sqrt_().add_(eps)
        p.addcdiv_(m[name] / c1, denom, value=-lr)


def linear_decay_lr(base_lr, iteration, total, final_fraction=0.0):
    """Learning rate decayed linearly per iteration from ``base_lr``."""
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return base_lr * (1.0 - (1.0 - final_fraction) * frac)


# ---------------------------------------------------------------------- rng

_PURPOSES: dict[str, int] = {}


def _purpose_code(purpose: str) -> int:
    code = _PURPOSES.get(purpose)
    if code is None:
        code = int.from_bytes(hashlib.blake2b(purpose.encode(), digest_size=4).digest(), "little")
        _PURPOSES[purpose] = code
    return code


def stream(seed: int, purpose: str, iteration: int = 0, index: int = 0) -> np.random.Generator:
    """Independent Philox generator keyed by (seed, purpose, iteration, index).

    Any single draw can be regenerated without replaying earlier ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_purpose_code(purpose), int(iteration), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def normal(seed, purpose, iteration, shape, indices=None, dtype=torch.float32):
    """Standard normal tensor of ``shape``; one stream per leading index."""
    if indices is None:
        indices = range(shape[0])
    rows = [stream(seed, purpose, iteration, i).standard_normal(shape[1:]) for i in indices]
    return torch.from_numpy(np.stack(rows)).to(dtype)


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FTDDMCKP"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None):
    """Write named tensors as little-endian float32.

    Layout: magic (8 bytes) | version u32 | meta_len u32 | meta JSON utf-8 |
    count u32 | per entry: name_len u16, name utf-8, ndim u8, dims u32 * ndim,
    float32 data (C order) | crc32 u32 of everything before it.
    """
    buf = io.BytesIO()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nb = name.encode()
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def load_checkpoint(path):
    """Return (tensors, meta) from a file written by :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: checksum mismatch")
    off = 8
    version, meta_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, meta


def module_tensors(module: torch.nn.Module, namespace: str) -> dict:
    """Parameters and buffers of ``module`` prefixed with ``namespace/``."""
    out = {f"{namespace}/{k}": v for k, v in module.state_dict().items()}
    return out


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], namespace: str):
    prefix = namespace + "/"
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise KeyError(f"checkpoint has no tensors under namespace '{namespace}'")
    ref = module.state_dict()
    state = {k: v.to(ref[k].dtype) if k in ref else v for k, v in state.items()}
    module.load_state_dict(state)


def named_parameters(modules: Iterable[tuple[str, torch.nn.Module]]):
    for ns, m in modules:
        for n, p in m.named_parameters():
            yield f"{ns}/{n}", p

"""Differentiable primitives and finite-difference gradient checking.

Tensors are ``torch.Tensor`` (the value/gradient carrier) and trainable
parameters are ``torch.nn.Parameter`` registered on modules, which gives each
one a unique dotted name.  The functions below pin down the op set the
denoiser, projector and losses are written against, with explicit shape
checks so that mismatches fail with both shapes in the message.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

L2_EPS = 1e-8

Value = torch.Tensor
Parameter = torch.nn.Parameter


class ShapeError(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class GradCheckError(FloatingPointError):
    pass


def _broadcastable(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    _broadcastable("add", a, b)
    return a + b


def mul(a, b):
    _broadcastable("mul", a, b)
    return a * b


def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with same padding; ``x`` is (B, C, H, W)."""
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d (odd kernel required)", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d bias", weight.shape, bias.shape)
    return F.conv2d(x, weight, bias, stride=1, padding=(kh // 2, kw // 2))


def relu(x):
    return torch.relu(x)


def silu(x):
    return F.silu(x)


def group_normalize(x, groups: int, weight=None, bias=None, eps: float = 1e-5):
    if x.dim() < 2 or x.shape[1] % groups != 0:
        raise ShapeError("group_normalize", x.shape, (groups,))
    return F.group_norm(x, groups, weight, bias, eps)


def mean(x, dim=None, keepdim=False):
    """Mean accumulated in float64, returned in the input dtype."""
    out = x.double().mean() if dim is None else x.double().mean(dim=dim, keepdim=keepdim)
    return out.to(x.dtype)


def sum(x, dim=None, keepdim=False):  # noqa: A001 - mirrors the op name
    out = x.double().sum() if dim is None else x.double().sum(dim=dim, keepdim=keepdim)
    return out.to(x.dtype)


def l2_normalize(x, dim: int = 1, eps: float = L2_EPS):
    """``x / sqrt(|x|^2 + eps)`` along ``dim``."""
    return x * torch.rsqrt((x * x).sum(dim=dim, keepdim=True) + eps)


def cosine_similarity(a, b, dim: int = 1):
    _broadcastable("cosine_similarity", a, b)
    return (l2_normalize(a, dim) * l2_normalize(b, dim)).sum(dim=dim)


def sigmoid_with_temperature(x, tau: float):
    """``1 / (1 + exp(-x / tau))`` without overflow for large ``|x| / tau``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return torch.sigmoid(x / tau)


def stop_gradient(x):
    return x.detach()


def bilinear_upsample(x, size: Sequence[int]):
    """Bilinear resize of (B, C, h, w) maps to ``size`` (half-pixel centres)."""
    if x.dim() != 4:
        raise ShapeError("bilinear_upsample", x.shape, tuple(size))
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def avg_pool_to(x, size: Sequence[int]):
    """Average-pool (B, C, H, W) maps down to ``size`` (integer factors)."""
    h, w = x.shape[-2:]
    if h % size[0] or w % size[1]:
        raise ShapeError("avg_pool_to", x.shape, tuple(size))
    if (h, w) == tuple(size):
        return x
    return F.avg_pool2d(x, (h // size[0], w // size[1]))


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` recomputes a scalar from the current values of ``params``; it is
    evaluated in whatever dtype the params hold, so pass float64 tensors for
    tight checks.  With ``max_coords`` only that many randomly chosen
    coordinates per parameter are probed.  Per coordinate the error is
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)``.
    """
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise GradCheckError(f"non-finite loss {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = rng.choice(flat.numel(), size=max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise GradCheckError("non-finite loss during finite differences")
                g_fd = (up - down) / (2 * eps)
                g_a = g.view(-1)[i].item()
                worst = max(worst, abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd)))
    return worst

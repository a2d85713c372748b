"""Differentiable layer primitives on ``(N, C, H, W)`` tensors.

Gradients come from torch autograd; every primitive here is covered by a
finite-difference check in the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.01


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1 convolution; 3x3 kernels use zero "same" padding, 1x1 none."""
    k = kernel.shape[-1]
    if k not in (1, 3) or kernel.shape[-2] != k:
        raise ValueError(f"only 1x1 and 3x3 kernels are supported, got {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    return F.conv2d(x, kernel, bias, stride=1, padding=k // 2)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax_channels(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=1)


def maxpool2(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return F.max_pool2d(x, kernel_size=2, stride=2)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3), keepdim=True)


def upsample_bilinear(x: torch.Tensor, target_hw: Sequence[int]) -> torch.Tensor:
    """Corner-aligned bilinear upsampling; identity when sizes already match."""
    target_hw = tuple(int(s) for s in target_hw)
    h, w = x.shape[-2:]
    if target_hw[0] < h or target_hw[1] < w:
        raise ValueError(f"upsample target {target_hw} smaller than source {(h, w)}")
    if target_hw == (h, w):
        return x
    return F.interpolate(x, size=target_hw, mode="bilinear", align_corners=True)


def resize_bilinear(x: torch.Tensor, target_hw: Sequence[int]) -> torch.Tensor:
    """Corner-aligned bilinear resize in either direction."""
    target_hw = tuple(int(s) for s in target_hw)
    if target_hw == tuple(x.shape[-2:]):
        return x
    return F.interpolate(x, size=target_hw, mode="bilinear", align_corners=True)


def concat_channels(xs: Sequence[torch.Tensor]) -> torch.Tensor:
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {tuple(t.shape)} with {tuple(ref)}")
    return torch.cat(list(xs), dim=1)


def mul_broadcast(x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scale channel ``c`` of ``x`` at every pixel by ``v[:, c]``; ``v`` is (N, C, 1, 1)."""
    if v.shape[1] != x.shape[1] or v.shape[2:] != (1, 1):
        raise ValueError(f"attention vector {tuple(v.shape)} does not match features {tuple(x.shape)}")
    return x * v


def gaussian_init(shape, std: float = INIT_STD, seed: int | torch.Generator = 0,
                  dtype=torch.float32) -> torch.Tensor:
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).mul_(std).to(dtype)


def gradient_of(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                upstream: torch.Tensor | None = None) -> tuple[torch.Tensor, ...]:
    """Gradients of ``<upstream, fn(*inputs)>`` with respect to each input."""
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    if upstream is None:
        upstream = torch.ones_like(out)
    grads = torch.autograd.grad(out, leaves, grad_outputs=upstream, allow_unused=True)
    return tuple(torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads))


class Conv(nn.Module):
    """1x1 or 3x3 convolution holding its own kernel and bias."""

    def __init__(self, in_channels: int, out_channels: int, size: int = 3):
        super().__init__()
        if size not in (1, 3):
            raise ValueError(f"conv size must be 1 or 3, got {size}")
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, size, size))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


def he_std(shape) -> float:
    """sqrt(2 / fan_in) for a (C_out, C_in, k, k) kernel."""
    fan_in = shape[1] * shape[2] * shape[3]
    return math.sqrt(2.0 / fan_in)


def init_gaussian_(module: nn.Module, seed: int = 0, std: float | str = INIT_STD) -> nn.Module:
    """Draw every kernel from N(0, std^2) and zero every bias, in parameter order.

    ``std="he"`` scales each kernel by ``sqrt(2 / fan_in)`` instead of a fixed value.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                s = he_std(p.shape) if std == "he" else float(std)
                p.copy_(gaussian_init(p.shape, s, gen, dtype=p.dtype))
    return module


def zero_init_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module

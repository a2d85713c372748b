"""Independent reference computations used by the tests."""

import itertools

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences (in place on a copy)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.linalg.vector_norm(a - b).item()
    den = max(torch.linalg.vector_norm(a).item(), torch.linalg.vector_norm(b).item(), 1e-12)
    return num / den


def param_gradcheck(model, loss_fn, h: float = 1e-4) -> dict:
    """Relative error of autograd vs central differences, per named parameter."""
    model.zero_grad()
    loss_fn().backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        orig = p.detach().clone()

        def f(value, p=p):
            with torch.no_grad():
                p.copy_(value)
            return loss_fn()

        numeric = central_difference(f, orig, h)
        with torch.no_grad():
            p.copy_(orig)
        errors[name] = relative_error(analytic, numeric)
    return errors


def dice_by_sets(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice from explicit voxel coordinate sets."""
    p = {tuple(c) for c in np.argwhere(pred > 0)}
    g = {tuple(c) for c in np.argwhere(gt > 0)}
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def conv2d_loops(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation by explicit loops, (N,C,H,W) layout."""
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, h, w))
    for bi, o, i, j in itertools.product(range(n), range(co), range(h), range(w)):
        out[bi, o, i, j] = (xp[bi, :, i:i + kh, j:j + kw] * k[o]).sum() + b[o]
    return out


def randomize_(model, seed: int = 0, bias_std: float = 0.1):
    """He-scaled kernels and random biases: a generic point with no pre-activation exactly at 0."""
    from sfan.nn_core import init_gaussian_

    init_gaussian_(model, seed, "he")
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * bias_std)
    return model

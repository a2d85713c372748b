"""Weighted cross entropy, Adam and the deterministic training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .model import ModelConfig, build_model, save_checkpoint

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
WEIGHT_RANGE = (0.1, 10.0)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 1000
    class_weights: list[float] | str = "auto"
    seed: int = 0
    checkpoint_every: int = 0
    patch_size: int = 64
    init_std: float | str = "he"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.class_weights != "auto":
            self.class_weights = [float(w) for w in self.class_weights]
            if not all(w > 0 for w in self.class_weights):
                raise ValueError("class weights must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: list[torch.Tensor]
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor]) -> "TrainState":
        params = list(params)
        return cls(params=params, m=[torch.zeros_like(p) for p in params],
                   v=[torch.zeros_like(p) for p in params])


def weighted_cross_entropy(probs: torch.Tensor, target: torch.Tensor, weights) -> torch.Tensor:
    """Mean over pixels of ``-w[t] * log(max(p[t], 1e-7))``.

    ``probs`` is ``(N, K, H, W)``; ``target`` holds class indices ``(N, H, W)``.
    """
    if probs.dim() != 4 or target.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise ValueError(f"target shape {tuple(target.shape)} does not match probs {tuple(probs.shape)}")
    k = probs.shape[1]
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class index outside [0, {k})")
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    if w.shape != (k,):
        raise ValueError(f"need {k} class weights, got {tuple(w.shape)}")
    p_t = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return (-w[target] * torch.log(p_t.clamp_min(PROB_FLOOR))).mean()


def auto_class_weights(labels, num_classes: int = 2) -> list[float]:
    """Inverse-frequency weights ``total / (K * count_c)``, clamped to [0.1, 10].

    ``labels`` is an array or an iterable of arrays of class indices.
    """
    if isinstance(labels, np.ndarray):
        labels = [labels]
    counts = np.zeros(num_classes, dtype=np.int64)
    for arr in labels:
        counts += np.bincount(np.asarray(arr).ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise EmptyDatasetError("no labelled pixels")
    lo, hi = WEIGHT_RANGE
    return [float(np.clip(total / (num_classes * c), lo, hi)) if c else hi for c in counts]


def adam_step(state: TrainState, grads: Sequence[torch.Tensor], cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update, applied in place."""
    if len(grads) != len(state.params):
        raise ValueError(f"{len(grads)} gradients for {len(state.params)} parameters")
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(state.params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# data


@dataclass
class SliceDataset:
    """Preprocessed volumes (z, y, x) in [0, 1] with aligned label volumes."""

    images: list[np.ndarray]
    labels: list[np.ndarray]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        for im, lb in zip(self.images, self.labels):
            if im.shape != lb.shape:
                raise ValueError(f"image {im.shape} and label {lb.shape} shapes differ")
        self.index = [(i, z) for i, im in enumerate(self.images) for z in range(im.shape[0])]

    def __len__(self):
        return len(self.index)

    @classmethod
    def from_slices(cls, images, labels) -> "SliceDataset":
        """Build from 2D slices, one single-slice volume each."""
        return cls([np.asarray(im, np.float32)[None] for im in images],
                   [np.asarray(lb, np.uint8)[None] for lb in labels])


def fit_to_size(arr: np.ndarray, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop (random offset, or centred without ``rng``) or zero-pad a 2D slice to ``size``."""
    out = arr
    for axis in (0, 1):
        n = out.shape[axis]
        if n > size:
            off = int(rng.integers(0, n - size + 1)) if rng is not None else (n - size) // 2
            out = np.take(out, range(off, off + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def sample_batch(dataset: SliceDataset, batch_size: int, rng: np.random.Generator, size: int):
    """Draw ``batch_size`` axial slices uniformly; returns ``(x (B,1,S,S), y (B,S,S))``."""
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset has no slices")
    picks = rng.integers(0, len(dataset), size=batch_size)
    xs, ys = [], []
    for k in picks:
        i, z = dataset.index[int(k)]
        im, lb = dataset.images[i][z], dataset.labels[i][z]
        # one crop window for image and label
        seed = int(rng.integers(0, 2 ** 31))
        xs.append(fit_to_size(im, size, np.random.default_rng(seed)))
        ys.append(fit_to_size(lb, size, np.random.default_rng(seed)))
    x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(ys).astype(np.int64))
    return x, y


# ---------------------------------------------------------------------------
# loop


@dataclass
class FitResult:
    checkpoint: Path
    losses: list[float]
    model: nn.Module


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, repr(loss)])


def fit(dataset: SliceDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
        name: str = "model") -> FitResult:
    """Train from a Gaussian initialization and write checkpoints under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_cfg.patch_size % model_cfg.divisor:
        raise ValueError(f"patch_size {train_cfg.patch_size} not divisible by {model_cfg.divisor}")
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg, seed=train_cfg.seed, std=train_cfg.init_std)
    model.train()
    weights = train_cfg.class_weights
    if weights == "auto":
        weights = auto_class_weights(dataset.labels, model_cfg.num_classes)
    log.info("class weights %s", weights)
    rng = np.random.default_rng(train_cfg.seed)
    state = TrainState.for_params(model.parameters())
    extra = {"train_config": train_cfg.to_dict(), "class_weights": list(weights)}
    ckpt = out_dir / name
    for step in range(1, train_cfg.max_steps + 1):
        x, y = sample_batch(dataset, train_cfg.batch_size, rng, train_cfg.patch_size)
        loss = weighted_cross_entropy(model(x), y, weights)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}")
        # disabled attention branches leave their parameters out of the graph
        grads = [torch.zeros_like(p) if g is None else g
                 for p, g in zip(state.params, torch.autograd.grad(loss, state.params, allow_unused=True))]
        adam_step(state, grads, train_cfg)
        state.losses.append(value)
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, value)
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"{name}_step{step:06d}", {**extra, "step": step})
    save_checkpoint(model, ckpt, {**extra, "step": state.step})
    write_loss_csv(state.losses, out_dir / f"{name}_loss.csv")
    model.eval()
    return FitResult(checkpoint=ckpt, losses=state.losses, model=model)

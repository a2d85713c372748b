"""Slice prediction, multi-scale fusion and the liver -> tumor cascade."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nn_core as core
from .preprocess import DEFAULT_MARGIN_MM, EmptyMaskError, RoiBox, crop, embed, liver_roi
from .volume_io import CtVolume, LabelSemantics, SegmentationMask

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 1.0, 1.5)


class EmptyLiverWarning(UserWarning):
    """Stage 1 found no liver; the tumor mask is all zeros."""


def _divisor(model) -> int:
    return model.cfg.divisor


@torch.no_grad()
def predict_slice(model, x: torch.Tensor) -> torch.Tensor:
    """Class probabilities for a ``(1, 1, H, W)`` slice.

    Sizes not divisible by ``2^(L-1)`` are zero-padded symmetrically and the
    output is cropped back.
    """
    d = _divisor(model)
    h, w = x.shape[-2:]
    ph, pw = (-h) % d, (-w) % d
    if ph or pw:
        top, left = ph // 2, pw // 2
        x = F.pad(x, (left, pw - left, top, ph - top))
        return model(x)[..., top:top + h, left:left + w]
    return model(x)


def scaled_size(n: int, scale: float, divisor: int) -> int:
    return max(divisor, int(round(n * scale / divisor)) * divisor)


@torch.no_grad()
def multi_scale_predict(model, x: torch.Tensor, scales: Sequence[float] = DEFAULT_SCALES) -> torch.Tensor:
    """Average the probability maps predicted on a resized image pyramid.

    Scale 1.0 runs at native size; other scales snap the resized slice to a
    multiple of ``2^(L-1)``.  Scales are processed in sorted order so the
    fused result does not depend on how they are listed.
    """
    scales = sorted(float(s) for s in scales)
    if not scales:
        raise ValueError("empty scale set")
    d = _divisor(model)
    h, w = x.shape[-2:]
    total = None
    for s in scales:
        if s == 1.0:
            p = predict_slice(model, x)
        else:
            xs = core.resize_bilinear(x, (scaled_size(h, s, d), scaled_size(w, s, d)))
            p = core.resize_bilinear(model(xs), (h, w))
        total = p if total is None else total + p
    fused = total / len(scales)
    return fused / fused.sum(dim=1, keepdim=True)


def binarize(probs, class_index: int = 1, threshold: float = 0.5) -> np.ndarray:
    """1 where ``probs[class_index] > threshold`` (strict), else 0."""
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    while p.ndim > 3:
        p = p[0]
    return (p[class_index] > threshold).astype(np.uint8)


@dataclass
class InferenceOptions:
    scales: tuple[float, ...] = DEFAULT_SCALES
    multi_scale: bool = True
    threshold: float = 0.5
    margin_mm: float = DEFAULT_MARGIN_MM
    liver_threshold: float = 0.5


def _predict_stack(model, stack: np.ndarray, fn) -> list[torch.Tensor]:
    return [fn(model, torch.from_numpy(np.ascontiguousarray(s, dtype=np.float32))[None, None])
            for s in stack]


def segment_liver(liver_model, vol: CtVolume, threshold: float = 0.5) -> SegmentationMask:
    probs = _predict_stack(liver_model, vol.voxels, predict_slice)
    labels = np.stack([binarize(p, 1, threshold) for p in probs])
    return SegmentationMask(labels, LabelSemantics.LIVER, spacing=vol.spacing, orientation=vol.orientation)


def predict_volume(tumor_model, liver_model, vol: CtVolume, opts: InferenceOptions | None = None,
                   liver_mask: SegmentationMask | None = None) -> SegmentationMask:
    """Two-stage cascade on a preprocessed volume.

    Stage 1 segments the liver (or uses ``liver_mask`` when given) and takes
    its ROI; stage 2 segments tumor per cropped slice and embeds the result.
    """
    opts = opts or InferenceOptions()
    if liver_mask is None:
        liver_mask = segment_liver(liver_model, vol, opts.liver_threshold)
    try:
        box = liver_roi(liver_mask, opts.margin_mm, vol.spacing)
    except EmptyMaskError:
        warnings.warn(f"{vol.case_id}: stage 1 found no liver, returning empty tumor mask",
                      EmptyLiverWarning, stacklevel=2)
        return SegmentationMask(np.zeros(vol.shape, np.uint8), LabelSemantics.TUMOR,
                                spacing=vol.spacing, orientation=vol.orientation)
    sub = crop(vol, box)
    if opts.multi_scale:
        fn = lambda m, x: multi_scale_predict(m, x, opts.scales)
    else:
        fn = predict_slice
    probs = _predict_stack(tumor_model, sub, fn)
    labels = np.stack([binarize(p, 1, opts.threshold) for p in probs])
    return embed(labels, box, vol.shape, LabelSemantics.TUMOR, vol.spacing, vol.orientation)

"""Orientation canonicalization, HU windowing and liver ROI cropping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume_io import (
    CANONICAL_ORIENTATION,
    ORIENTATION_CODES,
    CtVolume,
    SegmentationMask,
    ShapeMismatchError,
)

HU_WINDOW = (-75.0, 175.0)
DEFAULT_MARGIN_MM = 10.0

_PAIR_OF = {"L": 0, "R": 0, "P": 1, "A": 1, "I": 2, "S": 2}


class UnknownOrientationError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class BoxBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class RoiBox:
    """Half-open voxel box ``[z0, z1) x [y0, y1) x [x0, x1)``."""

    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int

    def __post_init__(self):
        for lo, hi in ((self.z0, self.z1), (self.y0, self.y1), (self.x0, self.x1)):
            if not 0 <= lo < hi:
                raise BoxBoundsError(f"invalid interval [{lo}, {hi}) in {self}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0

    def as_tuple(self) -> tuple[int, ...]:
        return self.z0, self.z1, self.y0, self.y1, self.x0, self.x1

    def check_within(self, shape) -> None:
        if self.z1 > shape[0] or self.y1 > shape[1] or self.x1 > shape[2]:
            raise BoxBoundsError(f"{self} exceeds array shape {tuple(shape)}")


def reorientation(code: str, target: str = CANONICAL_ORIENTATION):
    """Axis permutation and flips taking ``code``-ordered (z, y, x) arrays to ``target``.

    Returns ``(perm, flips, spacing_perm)``: transpose the array by ``perm``,
    then flip the output array axes listed in ``flips``; output spacing
    component ``i`` is input spacing component ``spacing_perm[i]``.
    """
    for c in (code, target):
        if c not in ORIENTATION_CODES:
            raise UnknownOrientationError(f"unknown orientation code {c!r}")
    # voxel axis i (x, y, z) lives at array axis 2 - i
    spacing_perm = []
    flips = []
    for i, letter in enumerate(target):
        src = next(j for j, c in enumerate(code) if _PAIR_OF[c] == _PAIR_OF[letter])
        spacing_perm.append(src)
        if code[src] != letter:
            flips.append(2 - i)
    perm = tuple(2 - spacing_perm[2 - a] for a in range(3))
    return perm, tuple(sorted(flips)), tuple(spacing_perm)


def _reorient_array(arr: np.ndarray, perm, flips) -> np.ndarray:
    out = np.transpose(arr, perm)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)


def normalize_orientation(vol: CtVolume, mask: SegmentationMask | None = None):
    """Permute/flip ``vol`` (and ``mask`` alongside it) into the canonical orientation."""
    perm, flips, sp_perm = reorientation(vol.orientation)
    spacing = tuple(vol.spacing[i] for i in sp_perm)
    out = vol.replace(voxels=_reorient_array(vol.voxels, perm, flips), spacing=spacing,
                      orientation=CANONICAL_ORIENTATION)
    out_mask = None
    if mask is not None:
        if mask.shape != vol.shape:
            raise ShapeMismatchError(f"mask shape {mask.shape} != volume shape {vol.shape}")
        out_mask = mask.replace(labels=_reorient_array(mask.labels, perm, flips), spacing=spacing,
                                orientation=CANONICAL_ORIENTATION)
    return out, out_mask


def clip_hu(vol: CtVolume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> CtVolume:
    if not lo < hi:
        raise ValueError(f"HU window requires lo < hi, got [{lo}, {hi}]")
    return vol.replace(voxels=np.clip(vol.voxels, np.float32(lo), np.float32(hi)))


def rescale_intensity(vol: CtVolume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> CtVolume:
    """Affinely map the clip window ``[lo, hi]`` onto ``[0, 1]``."""
    scaled = (vol.voxels.astype(np.float64) - lo) / (hi - lo)
    return vol.replace(voxels=np.clip(scaled, 0.0, 1.0).astype(np.float32))


def preprocess_volume(vol: CtVolume, masks=(), window=HU_WINDOW):
    """Canonicalize, window and rescale ``vol``; masks are reoriented alongside."""
    out_masks = []
    for m in masks:
        _, m2 = normalize_orientation(vol, m)
        out_masks.append(m2)
    vol, _ = normalize_orientation(vol)
    vol = rescale_intensity(clip_hu(vol, *window), *window)
    return vol, out_masks


def liver_roi(liver_mask, margin_mm: float = DEFAULT_MARGIN_MM, spacing=None) -> RoiBox:
    """Bounding box of the positive voxels, widened by ``margin_mm`` per side.

    ``spacing`` is ``(sx, sy, sz)``; it defaults to the mask's own spacing.
    """
    labels = liver_mask.labels if isinstance(liver_mask, SegmentationMask) else np.asarray(liver_mask)
    if spacing is None:
        spacing = liver_mask.spacing if isinstance(liver_mask, SegmentationMask) else (1.0, 1.0, 1.0)
    coords = np.argwhere(labels > 0)
    if coords.size == 0:
        raise EmptyMaskError("liver mask has no positive voxels")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    sx, sy, sz = spacing
    # tolerance absorbs float noise in margin / spacing
    pad = [math.ceil(margin_mm / s - 1e-9) if margin_mm > 0 else 0 for s in (sz, sy, sx)]
    bounds = []
    for axis in range(3):
        bounds.append(max(0, int(lo[axis]) - pad[axis]))
        bounds.append(min(labels.shape[axis], int(hi[axis]) + pad[axis]))
    return RoiBox(*bounds)


def crop(arr, box: RoiBox) -> np.ndarray:
    data = arr.voxels if isinstance(arr, CtVolume) else arr.labels if isinstance(arr, SegmentationMask) else arr
    data = np.asarray(data)
    box.check_within(data.shape)
    return data[box.slices].copy()


def embed(sub, box: RoiBox, full_shape, label_semantics=None, spacing=(1.0, 1.0, 1.0),
          orientation=CANONICAL_ORIENTATION) -> SegmentationMask:
    """Write ``sub`` into a zero-initialized mask of ``full_shape`` at ``box``."""
    if isinstance(sub, SegmentationMask):
        label_semantics = label_semantics or sub.label_semantics
        sub = sub.labels
    sub = np.asarray(sub)
    box.check_within(full_shape)
    if tuple(sub.shape) != box.shape:
        raise ShapeMismatchError(f"sub-mask shape {sub.shape} != box extents {box.shape}")
    full = np.zeros(tuple(full_shape), dtype=np.uint8)
    full[box.slices] = sub
    kwargs = {"label_semantics": label_semantics} if label_semantics else {}
    return SegmentationMask(full, spacing=spacing, orientation=orientation, **kwargs)

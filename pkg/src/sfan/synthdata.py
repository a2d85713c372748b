"""Deterministic CT phantoms: ellipsoidal liver, spherical tumors, Gaussian noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import CtVolume, LabelSemantics, Phase, SegmentationMask, save_mask, save_volume

SIZE_GROUPS = ("small", "middle", "large")

# tumor radius ranges (mm) chosen so the voxelized extent lands inside each group
RADIUS_MM = {"small": (1.2, 1.9), "middle": (3.0, 4.2), "large": (5.8, 7.0)}


class PhantomError(ValueError):
    pass


@dataclass
class Tumor:
    center: tuple[float, float, float]  # voxels (z, y, x)
    radius_mm: float
    hu_value: float = 30.0


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (24, 96, 96)
    spacing: tuple[float, float, float] = (0.6, 0.6, 1.0)
    liver_center: tuple[float, float, float] = (11.5, 50.0, 44.0)
    liver_semi_axes: tuple[float, float, float] = (9.5, 26.0, 30.0)
    tumors: list[Tumor] = field(default_factory=list)
    background_hu: float = -100.0
    liver_hu: float = 100.0
    noise_std: float = 5.0
    seed: int = 0
    phase: Phase = Phase.UNKNOWN
    case_id: str = "phantom"


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def liver_ellipsoid(spec: PhantomSpec) -> np.ndarray:
    z, y, x = _grid(spec.shape)
    (cz, cy, cx), (az, ay, ax) = spec.liver_center, spec.liver_semi_axes
    return ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0


def tumor_sphere(spec: PhantomSpec, tumor: Tumor) -> np.ndarray:
    if tumor.radius_mm <= 0:
        raise PhantomError(f"tumor radius must be positive, got {tumor.radius_mm}")
    z, y, x = _grid(spec.shape)
    sx, sy, sz = spec.spacing
    cz, cy, cx = tumor.center
    d2 = ((z - cz) * sz) ** 2 + ((y - cy) * sy) ** 2 + ((x - cx) * sx) ** 2
    return d2 <= tumor.radius_mm ** 2


def generate_phantom(spec: PhantomSpec):
    """Return ``(volume, tumor_mask, liver_mask)``; masks are noise-free."""
    liver = liver_ellipsoid(spec)
    tumor = np.zeros(spec.shape, dtype=bool)
    vox = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    vox[liver] = spec.liver_hu
    for t in spec.tumors:
        sphere = tumor_sphere(spec, t)
        if not sphere.any() or (sphere & ~liver).any():
            raise PhantomError(f"tumor at {t.center} r={t.radius_mm}mm is not inside the liver")
        vox[sphere] = t.hu_value
        tumor |= sphere
    if spec.noise_std > 0:
        vox += np.random.default_rng(spec.seed).normal(0.0, spec.noise_std, spec.shape)
    vol = CtVolume(vox.astype(np.float32), spacing=spec.spacing, phase=spec.phase, case_id=spec.case_id)
    mk = dict(spacing=spec.spacing, orientation=vol.orientation)
    return (vol,
            SegmentationMask(tumor.astype(np.uint8), LabelSemantics.TUMOR, **mk),
            SegmentationMask(liver.astype(np.uint8), LabelSemantics.LIVER, **mk))


def group_sequence(n_cases: int, size_mix) -> list[str]:
    """Interleaved group labels with counts proportional to ``size_mix``."""
    mix = np.asarray(size_mix, dtype=np.float64)
    if mix.shape != (3,) or (mix < 0).any() or mix.sum() == 0:
        raise ValueError(f"size_mix must be three non-negative weights, got {size_mix!r}")
    # smooth weighted round-robin keeps groups interleaved and exact in expectation
    credit = np.zeros(3)
    seq = []
    for _ in range(n_cases):
        credit += mix
        k = int(np.argmax(credit))
        credit[k] -= mix.sum()
        seq.append(SIZE_GROUPS[k])
    return seq


def _place_tumor(spec: PhantomSpec, group: str, rng: np.random.Generator) -> Tumor:
    from .evaluation import size_group, tumor_size

    lo, hi = RADIUS_MM[group]
    liver = liver_ellipsoid(spec)
    for _ in range(200):
        r = float(rng.uniform(lo, hi))
        # keep the centre well inside the ellipsoid so the sphere fits
        u = rng.uniform(-1, 1, size=3)
        u /= max(1.0, np.linalg.norm(u))
        axes = np.asarray(spec.liver_semi_axes)
        sp_zyx = np.asarray(spec.spacing[::-1])
        room = np.maximum(axes - r / sp_zyx - 1.0, 0.0)
        center = tuple(float(c) for c in np.round(np.asarray(spec.liver_center) + 0.6 * u * room))
        t = Tumor(center=center, radius_mm=r)
        sphere = tumor_sphere(spec, t)
        if not sphere.any() or (sphere & ~liver).any():
            continue
        mask = SegmentationMask(sphere.astype(np.uint8), spacing=spec.spacing)
        if size_group(tumor_size(mask, spec.spacing)) == group:
            return t
    raise PhantomError(f"could not place a {group} tumor in {spec.shape}")


def suite_spec(index: int, group: str, base_seed: int, **overrides) -> PhantomSpec:
    rng = np.random.default_rng([base_seed, index])
    spec = PhantomSpec(
        seed=int(rng.integers(0, 2 ** 31)),
        phase=Phase.ARTERIAL if index % 2 == 0 else Phase.VENOUS,
        case_id=f"case{index:03d}",
        **overrides,
    )
    # mild per-case variation of the liver shape
    jitter = rng.uniform(0.9, 1.0, size=3)
    spec.liver_semi_axes = tuple(float(a * j) for a, j in zip(spec.liver_semi_axes, jitter))
    spec.tumors = [_place_tumor(spec, group, rng)]
    return spec


def generate_suite(n_cases: int, base_seed: int, size_mix=(1, 1, 1), out_dir=None, **overrides):
    """Generate ``n_cases`` phantoms; with ``out_dir`` write them plus ``manifest.json``.

    Returns the manifest: a list of ``{case_id, volume_path, tumor_mask_path,
    liver_mask_path, phase}`` entries (paths relative to ``out_dir``), or, when
    ``out_dir`` is None, a list of ``(spec, volume, tumor, liver)`` tuples.
    """
    groups = group_sequence(n_cases, size_mix)
    cases = []
    for i, g in enumerate(groups):
        spec = suite_spec(i, g, base_seed, **overrides)
        cases.append((spec, *generate_phantom(spec)))
    if out_dir is None:
        return cases
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for spec, vol, tumor, liver in cases:
        entry = {
            "case_id": spec.case_id,
            "volume_path": f"{spec.case_id}_ct",
            "tumor_mask_path": f"{spec.case_id}_tumor",
            "liver_mask_path": f"{spec.case_id}_liver",
            "phase": spec.phase.value,
        }
        save_volume(vol, out / entry["volume_path"])
        save_mask(tumor, out / entry["tumor_mask_path"])
        save_mask(liver, out / entry["liver_mask_path"])
        manifest.append(entry)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(entries, path) -> None:
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


def read_manifest(path) -> tuple[list[dict], Path]:
    """Return manifest entries and the directory their relative paths resolve against."""
    path = Path(path)
    return json.loads(path.read_text()), path.parent

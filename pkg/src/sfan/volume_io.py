"""CT volume and mask containers plus their on-disk formats.

Two formats are supported:

* raw pair: ``<name>.json`` header next to a ``<name>.bin`` little-endian
  payload, voxels stored z-major, then y, then x;
* single-file NIfTI-1 (``.nii`` / ``.nii.gz``), read and written via nibabel.

Arrays are always indexed ``(z, y, x)``.  Spacing is ``(sx, sy, sz)`` in mm.
Orientation codes are three letters naming the anatomical direction in which
the x, y and z voxel indices increase (``"LPS"`` means x runs toward patient
left, y toward posterior, z toward superior).
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANONICAL_ORIENTATION = "LPS"

_AXIS_PAIRS = (("L", "R"), ("P", "A"), ("I", "S"))
_OPPOSITE = {a: b for pair in _AXIS_PAIRS for a, b in (pair, pair[::-1])}

ORIENTATION_CODES = frozenset(
    "".join(letters)
    for perm in itertools.permutations(_AXIS_PAIRS)
    for letters in itertools.product(*perm)
)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeIOError(Exception):
    """Base class for volume and mask I/O failures."""


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class CorruptHeaderError(VolumeIOError):
    pass


class CorruptPayloadError(VolumeIOError):
    pass


class NotThreeDimensionalError(VolumeIOError):
    pass


class NonPositiveSpacingError(VolumeIOError, ValueError):
    pass


class LabelRangeError(VolumeIOError, ValueError):
    pass


class ShapeMismatchError(VolumeIOError, ValueError):
    pass


class UnwritablePathError(VolumeIOError, OSError):
    pass


class Phase(str, enum.Enum):
    ARTERIAL = "arterial"
    VENOUS = "venous"
    UNKNOWN = "unknown"


class LabelSemantics(str, enum.Enum):
    TUMOR = "tumor_mask"
    LIVER = "liver_mask"


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise CorruptHeaderError(f"spacing must have 3 components, got {spacing!r}")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise NonPositiveSpacingError(f"spacing must be positive and finite, got {sp}")
    # stored at single precision so both file formats round-trip exactly
    return tuple(float(np.float32(s)) for s in sp)


def _check_orientation(code: str) -> str:
    if code not in ORIENTATION_CODES:
        raise CorruptHeaderError(f"unknown orientation code {code!r}")
    return code


@dataclass
class CtVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    phase: Phase = Phase.UNKNOWN
    case_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise NotThreeDimensionalError(f"expected 3D voxels, got shape {self.voxels.shape}")
        if 0 in self.voxels.shape:
            raise NotThreeDimensionalError(f"empty voxel array {self.voxels.shape}")
        self.spacing = _check_spacing(self.spacing)
        self.orientation = _check_orientation(self.orientation)
        self.phase = Phase(self.phase)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def replace(self, **changes) -> "CtVolume":
        fields = dict(voxels=self.voxels, spacing=self.spacing, orientation=self.orientation,
                      phase=self.phase, case_id=self.case_id)
        fields.update(changes)
        return CtVolume(**fields)


@dataclass
class SegmentationMask:
    labels: np.ndarray
    label_semantics: LabelSemantics = LabelSemantics.TUMOR
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))
    orientation: str = CANONICAL_ORIENTATION

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise NotThreeDimensionalError(f"expected 3D labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 1):
            raise LabelRangeError(f"label values must be in {{0, 1}}, found {np.unique(labels)}")
        self.labels = labels.astype(np.uint8)
        self.label_semantics = LabelSemantics(self.label_semantics)
        self.spacing = _check_spacing(self.spacing)
        self.orientation = _check_orientation(self.orientation)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def replace(self, **changes) -> "SegmentationMask":
        fields = dict(labels=self.labels, label_semantics=self.label_semantics,
                      spacing=self.spacing, orientation=self.orientation)
        fields.update(changes)
        return SegmentationMask(**fields)


# ---------------------------------------------------------------------------
# path helpers


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def raw_paths(path) -> tuple[Path, Path]:
    """Return the ``(header, payload)`` pair for a raw-format path.

    Any of ``name``, ``name.json`` or ``name.bin`` designates the same pair.
    """
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


# ---------------------------------------------------------------------------
# raw pair


def _read_raw(path: Path, expected_dtype: str):
    header_path, payload_path = raw_paths(path)
    for p in (header_path, payload_path):
        if not p.exists():
            raise MissingFileError(f"no such file: {p}")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
        spacing = header["spacing"]
        orientation = header.get("orientation", CANONICAL_ORIENTATION)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{header_path}: {exc}") from exc
    if len(shape) != 3:
        raise NotThreeDimensionalError(f"{header_path}: shape {shape} is not 3D")
    if dtype not in _DTYPES:
        raise CorruptHeaderError(f"{header_path}: unsupported dtype {dtype!r}")
    if dtype != expected_dtype:
        raise CorruptHeaderError(f"{header_path}: expected dtype {expected_dtype}, got {dtype}")
    if min(shape) < 1:
        raise NotThreeDimensionalError(f"{header_path}: empty shape {shape}")
    np_dtype = _DTYPES[dtype]
    payload = payload_path.read_bytes()
    expected = math.prod(shape) * np_dtype.itemsize
    if len(payload) != expected:
        raise CorruptPayloadError(
            f"{payload_path}: {len(payload)} bytes, header shape {shape} needs {expected}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return header, data, _check_spacing(spacing), orientation


def _write_raw(path: Path, header: dict, data: np.ndarray, dtype: str) -> None:
    header_path, payload_path = raw_paths(path)
    header = {"shape": list(data.shape), "dtype": dtype, **header}
    try:
        payload_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
        header_path.write_text(json.dumps(header, indent=2) + "\n")
    except OSError as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# NIfTI

_DESCRIP_RE = re.compile(r"sfan;phase=(\w*);case=(.*)")


def _affine(spacing, orientation: str) -> np.ndarray:
    # nibabel world frame is RAS+; columns follow voxel axes x, y, z
    aff = np.eye(4)
    aff[:3, :3] = 0.0
    positive = {"L": "R", "R": "R", "P": "A", "A": "A", "I": "S", "S": "S"}
    world_axis = {"R": 0, "A": 1, "S": 2}
    for i, letter in enumerate(orientation):
        sign = 1.0 if letter in "RAS" else -1.0
        aff[world_axis[positive[letter]], i] = sign * spacing[i]
    return aff


def _read_nifti(path: Path):
    import nibabel as nib

    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
        descrip = img.header["descrip"].tobytes().rstrip(b"\0").decode("ascii", "replace")
        orientation = "".join(nib.aff2axcodes(img.affine))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    if data.ndim != 3:
        raise NotThreeDimensionalError(f"{path}: data has {data.ndim} dimensions")
    data = np.ascontiguousarray(np.transpose(data, (2, 1, 0)))
    match = _DESCRIP_RE.fullmatch(descrip)
    meta = {"phase": match.group(1), "case_id": match.group(2)} if match else {}
    return data, _check_spacing(zooms[:3]), orientation, meta


def _write_nifti(path: Path, data: np.ndarray, spacing, orientation: str, descrip: str) -> None:
    import nibabel as nib

    img = nib.Nifti1Image(np.transpose(data, (2, 1, 0)), _affine(spacing, orientation))
    img.header.set_zooms(spacing)
    img.header["descrip"] = descrip.encode("ascii", "replace")[:79]
    img.header.set_sform(img.affine, code=1)
    img.header.set_qform(img.affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# public API


def load_volume(path, phase: Phase | str | None = None, case_id: str | None = None) -> CtVolume:
    """Load a CT volume from a NIfTI file or a raw pair.

    ``phase`` and ``case_id`` override whatever the file carries; manifests
    use this to attach contrast-phase tags.
    """
    path = Path(path)
    if _is_nifti(path):
        data, spacing, orientation, meta = _read_nifti(path)
        stem = path.name[: -len(".nii.gz")] if path.name.endswith(".nii.gz") else path.stem
        file_phase = meta.get("phase", Phase.UNKNOWN.value) or Phase.UNKNOWN.value
        file_case = meta.get("case_id", stem)
    else:
        header, data, spacing, orientation = _read_raw(path, "f32")
        file_phase = header.get("phase", Phase.UNKNOWN.value)
        file_case = header.get("case_id", raw_paths(path)[0].stem)
    try:
        return CtVolume(
            voxels=data.astype(np.float32, copy=False),
            spacing=spacing,
            orientation=orientation,
            phase=Phase(phase if phase is not None else file_phase),
            case_id=case_id if case_id is not None else str(file_case),
        )
    except ValueError as exc:
        if isinstance(exc, VolumeIOError):
            raise
        raise CorruptHeaderError(f"{path}: {exc}") from exc


def save_volume(vol: CtVolume, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise UnwritablePathError(f"parent directory does not exist: {path.parent}")
    if _is_nifti(path):
        _write_nifti(path, vol.voxels.astype(np.float32), vol.spacing, vol.orientation,
                     f"sfan;phase={vol.phase.value};case={vol.case_id}")
    else:
        _write_raw(path, {
            "spacing": list(vol.spacing),
            "orientation": vol.orientation,
            "phase": vol.phase.value,
            "case_id": vol.case_id,
        }, vol.voxels, "f32")


def load_mask(path, reference_shape: tuple[int, ...] | None = None,
              label_semantics: LabelSemantics | str | None = None) -> SegmentationMask:
    path = Path(path)
    if _is_nifti(path):
        data, spacing, orientation, _ = _read_nifti(path)
        file_semantics = LabelSemantics.TUMOR
    else:
        header, data, spacing, orientation = _read_raw(path, "u8")
        file_semantics = header.get("label_semantics", LabelSemantics.TUMOR.value)
    if not np.isin(data, (0, 1)).all():
        raise LabelRangeError(f"{path}: label values {np.unique(data).tolist()} outside {{0, 1}}")
    if reference_shape is not None and tuple(data.shape) != tuple(reference_shape):
        raise ShapeMismatchError(f"{path}: mask shape {data.shape} != reference {tuple(reference_shape)}")
    return SegmentationMask(
        labels=data.astype(np.uint8, copy=False),
        label_semantics=LabelSemantics(label_semantics or file_semantics),
        spacing=spacing,
        orientation=orientation,
    )


def save_mask(mask: SegmentationMask, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise UnwritablePathError(f"parent directory does not exist: {path.parent}")
    if _is_nifti(path):
        _write_nifti(path, mask.labels.astype(np.uint8), mask.spacing, mask.orientation,
                     f"sfan;semantics={mask.label_semantics.value}")
    else:
        _write_raw(path, {
            "spacing": list(mask.spacing),
            "orientation": mask.orientation,
            "label_semantics": mask.label_semantics.value,
        }, mask.labels, "u8")

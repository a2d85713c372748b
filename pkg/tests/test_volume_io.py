import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfan.volume_io import (
    ORIENTATION_CODES,
    CorruptHeaderError,
    CorruptPayloadError,
    CtVolume,
    LabelRangeError,
    LabelSemantics,
    MissingFileError,
    NonPositiveSpacingError,
    NotThreeDimensionalError,
    Phase,
    SegmentationMask,
    ShapeMismatchError,
    UnwritablePathError,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)


def _raw_header(path, **kw):
    header = {"shape": [4, 8, 8], "dtype": "f32", "spacing": [1.0, 1.0, 2.5],
              "orientation": "LPS", "phase": "unknown", "case_id": "x"}
    header.update(kw)
    (path.parent / (path.name + ".json")).write_text(json.dumps(header))


def _volume(rng, shape=(3, 5, 7), **kw):
    return CtVolume(rng.normal(0, 100, shape).astype(np.float32), **kw)


def test_orientation_code_count():
    assert len(ORIENTATION_CODES) == 48


@pytest.mark.parametrize("suffix", ["", ".nii", ".nii.gz"])
def test_volume_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    vol = _volume(rng, spacing=(0.7, 0.55, 2.5), orientation="RAS", phase="venous", case_id="c1")
    path = tmp_path / f"vol{suffix}"
    save_volume(vol, path)
    back = load_volume(path)
    assert back.voxels.tobytes() == vol.voxels.tobytes()
    assert back.spacing == vol.spacing
    assert back.orientation == "RAS"
    assert back.phase is Phase.VENOUS
    assert back.case_id == "c1"


def test_raw_payload_layout(tmp_path):
    save_volume(CtVolume(np.zeros((2, 2, 2))), tmp_path / "z")
    assert (tmp_path / "z.bin").read_bytes() == b"\0" * 32
    save_volume(CtVolume(np.full((1, 1, 1), 42.5)), tmp_path / "one")
    assert (tmp_path / "one.bin").read_bytes() == struct.pack("<f", 42.5)


def test_raw_voxel_order_is_z_major(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    save_volume(CtVolume(arr), tmp_path / "o")
    payload = np.frombuffer((tmp_path / "o.bin").read_bytes(), dtype="<f4")
    assert payload[1] == arr[0, 0, 1]
    assert payload[4] == arr[0, 1, 0]
    assert payload[12] == arr[1, 0, 0]


def test_hand_built_raw_pair(tmp_path):
    p = tmp_path / "hand"
    _raw_header(p)
    (tmp_path / "hand.bin").write_bytes(np.arange(256, dtype="<f4").tobytes())
    vol = load_volume(p)
    assert vol.shape == (4, 8, 8)
    assert vol.voxels[1, 0, 0] == 64.0


def test_short_payload_is_corrupt(tmp_path):
    p = tmp_path / "hand"
    _raw_header(p)
    (tmp_path / "hand.bin").write_bytes(np.zeros(128, dtype="<f4").tobytes())
    with pytest.raises(CorruptPayloadError):
        load_volume(p)


def test_distinct_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_volume(tmp_path / "nope")
    p = tmp_path / "bad"
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "bad.bin").write_bytes(b"")
    with pytest.raises(CorruptHeaderError):
        load_volume(p)
    p = tmp_path / "flat"
    _raw_header(p, shape=[8, 8])
    (tmp_path / "flat.bin").write_bytes(np.zeros(64, "<f4").tobytes())
    with pytest.raises(NotThreeDimensionalError):
        load_volume(p)
    p = tmp_path / "sp"
    _raw_header(p, spacing=[0, 1, 1])
    (tmp_path / "sp.bin").write_bytes(np.zeros(256, "<f4").tobytes())
    with pytest.raises(NonPositiveSpacingError):
        load_volume(p)


def test_nifti_non_3d_rejected(tmp_path):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.zeros((4, 4), np.float32), np.eye(4)), str(tmp_path / "flat.nii"))
    with pytest.raises(NotThreeDimensionalError):
        load_volume(tmp_path / "flat.nii")


def test_nifti_from_foreign_writer(tmp_path):
    import nibabel as nib

    data = np.arange(60, dtype=np.float32).reshape(5, 4, 3)  # nibabel order (x, y, z)
    aff = np.diag([-0.8, -0.8, 2.0, 1.0])
    nib.save(nib.Nifti1Image(data, aff), str(tmp_path / "lits.nii.gz"))
    vol = load_volume(tmp_path / "lits.nii.gz")
    assert vol.shape == (3, 4, 5)
    assert vol.voxels[2, 1, 0] == data[0, 1, 2]
    assert vol.orientation == "LPS"
    assert vol.spacing == pytest.approx((0.8, 0.8, 2.0))
    assert vol.case_id == "lits"
    assert vol.phase is Phase.UNKNOWN


def test_invalid_spacing_in_constructor():
    with pytest.raises(NonPositiveSpacingError):
        CtVolume(np.zeros((1, 1, 1)), spacing=(0, 1, 1))
    with pytest.raises(NonPositiveSpacingError):
        CtVolume(np.zeros((1, 1, 1)), spacing=(1, float("inf"), 1))


def test_unwritable(tmp_path):
    with pytest.raises(UnwritablePathError):
        save_volume(CtVolume(np.zeros((1, 1, 1))), tmp_path / "missing" / "v")


@pytest.mark.parametrize("suffix", ["", ".nii.gz"])
def test_mask_round_trip(tmp_path, suffix):
    m = SegmentationMask(np.zeros((4, 8, 8), np.uint8), LabelSemantics.LIVER, spacing=(1, 1, 3))
    save_mask(m, tmp_path / f"m{suffix}")
    back = load_mask(tmp_path / f"m{suffix}", label_semantics="liver_mask")
    assert back.labels.tobytes() == m.labels.tobytes()
    assert back.label_semantics is LabelSemantics.LIVER
    assert back.spacing == m.spacing


def test_mask_label_range(tmp_path):
    p = tmp_path / "m"
    _raw_header(p, dtype="u8", shape=[1, 1, 2])
    (tmp_path / "m.bin").write_bytes(bytes([0, 3]))
    with pytest.raises(LabelRangeError):
        load_mask(p)
    with pytest.raises(LabelRangeError):
        SegmentationMask(np.full((1, 1, 1), 2))


def test_mask_reference_shape(tmp_path):
    save_mask(SegmentationMask(np.zeros((4, 8, 8))), tmp_path / "m")
    with pytest.raises(ShapeMismatchError):
        load_mask(tmp_path / "m", reference_shape=(4, 8, 9))
    assert load_mask(tmp_path / "m", reference_shape=(4, 8, 8)).shape == (4, 8, 8)


def test_mask_dtype_mismatch(tmp_path):
    save_volume(CtVolume(np.zeros((1, 1, 1))), tmp_path / "v")
    with pytest.raises(CorruptHeaderError):
        load_mask(tmp_path / "v")


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 5)] * 3),
    seed=st.integers(0, 2 ** 16),
    orientation=st.sampled_from(sorted(ORIENTATION_CODES)),
    phase=st.sampled_from(list(Phase)),
    spacing=st.tuples(*[st.floats(0.1, 8.0)] * 3),
    nifti=st.booleans(),
)
def test_round_trip_property(tmp_path_factory, shape, seed, orientation, phase, spacing, nifti):
    d = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(seed)
    vol = CtVolume(rng.normal(0, 300, shape), spacing=spacing, orientation=orientation, phase=phase,
                   case_id=f"c{seed}")
    mask = SegmentationMask(rng.integers(0, 2, shape), spacing=spacing, orientation=orientation)
    ext = ".nii.gz" if nifti else ""
    save_volume(vol, d / f"v{ext}")
    save_mask(mask, d / f"m{ext}")
    v2, m2 = load_volume(d / f"v{ext}"), load_mask(d / f"m{ext}")
    assert v2.voxels.tobytes() == vol.voxels.tobytes()
    assert (v2.spacing, v2.orientation, v2.phase, v2.case_id) == (vol.spacing, orientation, phase, vol.case_id)
    assert m2.labels.tobytes() == mask.labels.tobytes()
    assert (m2.spacing, m2.orientation) == (mask.spacing, orientation)


def test_load_rejects_every_wrong_payload_size(tmp_path):
    p = tmp_path / "s"
    _raw_header(p, shape=[2, 2, 2])
    for n in (0, 7, 9, 31, 33):
        (tmp_path / "s.bin").write_bytes(b"\0" * n)
        with pytest.raises(CorruptPayloadError):
            load_volume(p)
    (tmp_path / "s.bin").write_bytes(b"\0" * 32)
    assert load_volume(p).shape == (2, 2, 2)

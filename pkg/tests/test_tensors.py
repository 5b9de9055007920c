import json
import struct

import numpy as np
import pytest

from motionbias.errors import FormatError, ShapeError, ValidationError
from motionbias.tensors import (
    HEADER,
    CaseRecord,
    Manifest,
    ManifestCase,
    SeverityCategory,
    as_image,
    as_mask,
    decode_tensor,
    encode_tensor,
    load_case,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)


def _header(magic=b"MRT1", version=1, code=1, ndim=2, h=2, w=3):
    return struct.pack("<4sHBBII", magic, version, code, ndim, h, w)


def test_header_is_sixteen_bytes():
    assert HEADER.size == 16
    raw = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert len(raw) == 16 + 2 * 3 * 4
    assert raw[:4] == b"MRT1"


def test_image_tensor_keeps_float32_values(tmp_path):
    grid = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_tensor(tmp_path / "a.mrt", grid)
    back = read_tensor(tmp_path / "a.mrt")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, grid)


def test_mask_and_complex_dtypes():
    mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    assert decode_tensor(encode_tensor(mask)).dtype == np.uint8
    spectrum = np.array([[1 + 2j, -0.5j]], dtype=np.complex64)
    back = decode_tensor(encode_tensor(spectrum))
    assert back.dtype == np.complex64
    np.testing.assert_array_equal(back, spectrum)


@pytest.mark.parametrize("header", [
    _header(magic=b"MRT2"),
    _header(version=2),
    _header(code=9),
    _header(ndim=3),
])
def test_malformed_header_is_format_error(header):
    with pytest.raises(FormatError):
        decode_tensor(header + b"\x00" * 24)


def test_payload_length_mismatch():
    with pytest.raises(FormatError, match="payload"):
        decode_tensor(_header() + b"\x00" * 23)


def test_truncated_header():
    with pytest.raises(FormatError):
        decode_tensor(b"MRT1")


def test_mask_payload_must_be_binary():
    raw = _header(code=2, h=1, w=2) + bytes([0, 2])
    with pytest.raises(FormatError):
        decode_tensor(raw)


def test_read_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.mrt"):
        read_tensor(tmp_path / "nope.mrt")


def test_validators():
    assert as_image([[1, 2]]).dtype == np.float64
    with pytest.raises(ValidationError):
        as_image([[np.nan]])
    with pytest.raises(ShapeError):
        as_image(np.zeros(4))
    with pytest.raises(ValidationError):
        as_mask([[0, 2]])
    assert as_mask(np.array([[True, False]])).dtype == np.uint8


def test_case_record_checks_lesion_inside_brain():
    brain = np.zeros((4, 4), dtype=np.uint8)
    brain[1:3, 1:3] = 1
    lesion = np.zeros_like(brain)
    lesion[0, 0] = 1
    with pytest.raises(ValidationError, match="outside"):
        CaseRecord("c", np.zeros((4, 4)), brain, lesion)


def test_case_record_shape_mismatch():
    with pytest.raises(ShapeError):
        CaseRecord("c", np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8))


def test_case_record_is_read_only(phantom_case):
    with pytest.raises(ValueError):
        phantom_case.image[0, 0] = 1.0


def _write_case(root, case_id="c0"):
    write_tensor(root / f"{case_id}.mrt", np.ones((4, 4), dtype=np.float32))
    write_tensor(root / f"{case_id}_b.mrt", np.ones((4, 4), dtype=np.uint8))
    write_tensor(root / f"{case_id}_l.mrt", np.zeros((4, 4), dtype=np.uint8))
    return ManifestCase(case_id=case_id, image=f"{case_id}.mrt", brain_mask=f"{case_id}_b.mrt",
                        lesion_mask=f"{case_id}_l.mrt")


def test_manifest_roundtrip_and_load_case(tmp_path):
    entry = _write_case(tmp_path)
    save_manifest(Manifest(seed=7, cases=[entry]), tmp_path / "manifest.json")
    manifest = load_manifest(tmp_path / "manifest.json")
    assert manifest.seed == 7
    case = load_case(manifest.case("c0"), tmp_path)
    assert case.shape == (4, 4)
    with pytest.raises(ValidationError, match="skull"):
        load_case(manifest.case("c0"), tmp_path, "skull")


def test_manifest_rejects_missing_files(tmp_path):
    entry = _write_case(tmp_path)
    (tmp_path / "c0_l.mrt").unlink()
    save_manifest(Manifest(cases=[entry]), tmp_path / "manifest.json")
    with pytest.raises(ValidationError, match="c0_l.mrt"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_rejects_duplicates_and_unknown_keys(tmp_path):
    entry = _write_case(tmp_path).model_dump(mode="json")
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"format_version": 1, "seed": 0, "cases": [entry, entry]}))
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(path)
    path.write_text(json.dumps({"format_version": 1, "seed": 0, "cases": [], "extra": 1}))
    with pytest.raises(ValidationError):
        load_manifest(path)
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        load_manifest(path)


def test_severity_rank_order():
    assert [c.rank for c in SeverityCategory] == [0, 1, 2, 3]

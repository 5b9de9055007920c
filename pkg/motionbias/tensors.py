"""
Data model for image slices, masks and k-space grids.

Grids are plain 2-D numpy arrays checked by the ``as_*`` validators; a case
bundles an image with its brain and lesion masks. On disk every grid is an
MRT1 file and a cohort is described by a JSON manifest.

MRT1 layout (little-endian, 16-byte header):

    offset  size  field
    0       4     magic b"MRT1"
    4       2     version (u16) = 1
    6       1     dtype code (u8): 1 = f32 real, 2 = u8 mask, 3 = f32 complex interleaved
    7       1     ndim (u8) = 2
    8       4     height (u32)
    12      4     width (u32)
    16      ...   row-major payload
"""
import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from motionbias.errors import FormatError, ShapeError, ValidationError


class SeverityCategory(str, Enum):
    MINIMAL = "minimal"
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"

    @property
    def rank(self) -> int:
        """0 for minimal up to 3 for severe."""
        return list(SeverityCategory).index(self)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# ---------------------------------------------------------------------------
# Grid validators
# ---------------------------------------------------------------------------

def _check_2d(arr: np.ndarray, kind: str) -> None:
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{kind} must be a non-empty 2-D grid, got shape {arr.shape}")


def as_image(arr) -> np.ndarray:
    """Validate a real image and return it as float64."""
    image = np.asarray(arr)
    if np.iscomplexobj(image):
        raise ValidationError("image must be real-valued")
    image = image.astype(np.float64, copy=False)
    _check_2d(image, "image")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    return image


def as_mask(arr) -> np.ndarray:
    """Validate a binary mask and return it as uint8."""
    mask = np.asarray(arr)
    _check_2d(mask, "mask")
    if mask.dtype != np.bool_ and not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask must contain only 0 and 1")
    return mask.astype(np.uint8, copy=False)


def as_kspace(arr) -> np.ndarray:
    """Validate a complex grid and return it as complex128."""
    kspace = np.asarray(arr).astype(np.complex128, copy=False)
    _check_2d(kspace, "k-space grid")
    if not np.all(np.isfinite(kspace)):
        raise ValidationError("k-space grid contains non-finite values")
    return kspace


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    severity: Optional[SeverityCategory] = None
    split: Optional[Split] = None

    def __post_init__(self):
        image = as_image(self.image)
        brain = as_mask(self.brain_mask)
        lesion = as_mask(self.lesion_mask)
        if brain.shape != image.shape or lesion.shape != image.shape:
            raise ShapeError(
                f"case {self.case_id}: image {image.shape}, brain {brain.shape}, "
                f"lesion {lesion.shape} must share one shape"
            )
        if np.any(lesion & (1 - brain)):
            raise ValidationError(f"case {self.case_id}: lesion extends outside the brain mask")
        object.__setattr__(self, "image", _frozen(image))
        object.__setattr__(self, "brain_mask", _frozen(brain))
        object.__setattr__(self, "lesion_mask", _frozen(lesion))

    @property
    def shape(self):
        return self.image.shape

    def with_image(self, image: np.ndarray) -> "CaseRecord":
        return replace(self, image=image)


# ---------------------------------------------------------------------------
# MRT1 tensor files
# ---------------------------------------------------------------------------

MAGIC = b"MRT1"
VERSION = 1
HEADER = struct.Struct("<4sHBBII")

DTYPE_REAL = 1
DTYPE_MASK = 2
DTYPE_COMPLEX = 3

_PAYLOAD_DTYPES = {
    DTYPE_REAL: np.dtype("<f4"),
    DTYPE_MASK: np.dtype("u1"),
    DTYPE_COMPLEX: np.dtype("<c8"),
}


def _dtype_code(arr: np.ndarray) -> int:
    if np.iscomplexobj(arr):
        return DTYPE_COMPLEX
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return DTYPE_MASK
    if np.issubdtype(arr.dtype, np.floating):
        return DTYPE_REAL
    raise ValidationError(f"unsupported grid dtype {arr.dtype}; use float, complex or uint8 masks")


def encode_tensor(grid) -> bytes:
    arr = np.asarray(grid)
    _check_2d(arr, "grid")
    code = _dtype_code(arr)
    if code == DTYPE_MASK:
        arr = as_mask(arr)
    height, width = arr.shape
    payload = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, VERSION, code, 2, height, width) + payload


def decode_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < HEADER.size:
        raise FormatError(f"{source}: file shorter than the {HEADER.size}-byte header")
    magic, version, code, ndim, height, width = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _PAYLOAD_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    if ndim != 2:
        raise FormatError(f"{source}: expected ndim 2, got {ndim}")
    dtype = _PAYLOAD_DTYPES[code]
    expected = height * width * dtype.itemsize
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if code == DTYPE_MASK and np.any(arr > 1):
        raise FormatError(f"{source}: mask payload contains values other than 0 and 1")
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, grid) -> None:
    """Write a 2-D grid as an MRT1 file."""
    path = Path(path)
    data = encode_tensor(grid)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(e.errno, f"cannot write tensor {path}: {e.strerror}") from e


def read_tensor(path) -> np.ndarray:
    """Read an MRT1 file: float32 image, uint8 mask or complex64 grid."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(e.errno, f"cannot read tensor {path}: {e.strerror}") from e
    return decode_tensor(raw, str(path))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


class ManifestCase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    case_id: str
    image: str
    brain_mask: str
    lesion_mask: str
    skull_image: Optional[str] = None  # clean slice plus simulated skull
    motion_image: Optional[str] = None  # skull slice after motion corruption
    severity: Optional[SeverityCategory] = None
    split: Optional[Split] = None
    motion_events: Optional[List[Dict[str, float]]] = None  # dx, dy, angle, event_profile per event

    def files(self) -> List[str]:
        return [p for p in (self.image, self.brain_mask, self.lesion_mask,
                            self.skull_image, self.motion_image) if p is not None]


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = MANIFEST_VERSION
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    cases: List[ManifestCase] = []

    @model_validator(mode="after")
    def _unique_ids(self):
        seen = set()
        for case in self.cases:
            if case.case_id in seen:
                raise ValueError(f"duplicate case_id {case.case_id!r}")
            seen.add(case.case_id)
        return self

    def case(self, case_id: str) -> ManifestCase:
        for case in self.cases:
            if case.case_id == case_id:
                return case
        raise ValidationError(f"case {case_id!r} not in manifest")


def load_manifest(path) -> Manifest:
    """Parse a manifest and check that every referenced file exists."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(e.errno, f"cannot read manifest {path}: {e.strerror}") from e
    try:
        manifest = Manifest.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not a JSON document ({e})") from e
    except pydantic.ValidationError as e:
        raise ValidationError(f"{path}: invalid manifest: {e}") from e
    if manifest.format_version != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {manifest.format_version}")
    base = path.parent
    for case in manifest.cases:
        for rel in case.files():
            if not (base / rel).is_file():
                raise ValidationError(f"{path}: case {case.case_id} references missing file {rel}")
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    text = manifest.model_dump_json(indent=2) + "\n"
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(e.errno, f"cannot write manifest {path}: {e.strerror}") from e


IMAGE_VARIANTS = ("clean", "skull", "motion")


def load_case(entry: ManifestCase, base_dir, variant: str = "clean") -> CaseRecord:
    """Build a CaseRecord from manifest files; variant selects which image."""
    base = Path(base_dir)
    if variant == "clean":
        rel = entry.image
    elif variant == "skull":
        rel = entry.skull_image
    elif variant == "motion":
        rel = entry.motion_image
    else:
        raise ValidationError(f"unknown image variant {variant!r}; expected one of {IMAGE_VARIANTS}")
    if rel is None:
        raise ValidationError(f"case {entry.case_id} has no {variant} image; run the corrupt step first")
    return CaseRecord(
        case_id=entry.case_id,
        image=read_tensor(base / rel),
        brain_mask=read_tensor(base / entry.brain_mask),
        lesion_mask=read_tensor(base / entry.lesion_mask),
        severity=entry.severity,
        split=entry.split,
    )

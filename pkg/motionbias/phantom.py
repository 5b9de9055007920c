"""
Synthetic brain-slice phantoms with ground-truth lesion masks.

A phantom is a textured elliptical brain on a zero background with one bright
lesion whose boundary is a radially perturbed ellipse. Geometry is drawn first
and rendering second, both from the same generator, so a phantom is fully
determined by its seed.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from motionbias.errors import ValidationError
from motionbias.rng import Stream, make_rng
from motionbias.tensors import CaseRecord


class PhantomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    size: int = Field(default=64, ge=32)
    brain_radius_range: Tuple[float, float] = (0.30, 0.40)  # fraction of size
    brain_aspect_range: Tuple[float, float] = (0.85, 1.0)
    lesion_radius_range: Tuple[float, float] = (0.25, 0.45)  # fraction of brain minor radius
    lesion_aspect_range: Tuple[float, float] = (0.7, 1.0)
    boundary_amplitude: float = Field(default=0.15, ge=0.0, lt=1.0)
    boundary_lobes: Tuple[int, int] = (3, 6)
    texture_scale: float = Field(default=0.12, gt=0.0)  # bump width, fraction of size
    texture_bumps: int = Field(default=6, ge=0, le=8)
    texture_amplitude: float = Field(default=0.15, ge=0.0, lt=1.0)
    lesion_contrast: float = Field(default=1.8, gt=1.0)
    lesion_mottle: float = Field(default=0.05, ge=0.0, lt=1.0)

    @field_validator("brain_radius_range", "brain_aspect_range", "lesion_radius_range",
                     "lesion_aspect_range", "boundary_lobes")
    @classmethod
    def _ordered(cls, v):
        if v[0] <= 0 or v[0] > v[1]:
            raise ValueError(f"range must satisfy 0 < lo <= hi, got {v}")
        return v

    def check_fit(self) -> None:
        """Raise ValidationError unless every sampled lesion fits inside its brain."""
        if self.brain_radius_range[1] > 0.5:
            raise ValidationError("brain_radius_range upper bound exceeds half the image")
        if self.brain_aspect_range[1] > 1.0 or self.lesion_aspect_range[1] > 1.0:
            raise ValidationError("aspect ranges must not exceed 1")
        # lesion is placed within (1 - reach) of the brain's minor radius
        reach = self.lesion_radius_range[1] * (1.0 + self.boundary_amplitude)
        if reach >= 1.0:
            raise ValidationError(
                f"lesion radius {self.lesion_radius_range[1]} with boundary amplitude "
                f"{self.boundary_amplitude} does not fit inside the brain"
            )
        if self.lesion_contrast * (1.0 - self.lesion_mottle) <= 1.0:
            raise ValidationError("lesion_contrast * (1 - lesion_mottle) must exceed 1")


@dataclass(frozen=True)
class PhantomGeometry:
    centre: Tuple[float, float]
    brain_axes: Tuple[float, float]  # (row, col) semi-axes, pixels
    brain_tilt: float  # radians
    lesion_centre: Tuple[float, float]
    lesion_axes: Tuple[float, float]
    lesion_tilt: float
    lobes: int
    lobe_phase: float
    amplitude: float

    @property
    def lesion_area(self) -> float:
        """Continuous area of the perturbed lesion ellipse."""
        a, b = self.lesion_axes
        return float(np.pi * a * b * (1.0 + self.amplitude ** 2 / 2.0))

    @property
    def brain_area(self) -> float:
        a, b = self.brain_axes
        return float(np.pi * a * b)


def sample_geometry(cfg: PhantomConfig, rng: np.random.Generator) -> PhantomGeometry:
    cfg.check_fit()
    size = cfg.size
    centre = ((size - 1) / 2.0, (size - 1) / 2.0)
    major = rng.uniform(*cfg.brain_radius_range) * size
    minor = major * rng.uniform(*cfg.brain_aspect_range)
    brain_tilt = rng.uniform(0.0, np.pi)

    lesion_major = rng.uniform(*cfg.lesion_radius_range) * minor
    lesion_minor = lesion_major * rng.uniform(*cfg.lesion_aspect_range)
    reach = lesion_major * (1.0 + cfg.boundary_amplitude)
    # uniform point in the disc where the whole lesion stays inside the minor radius
    room = minor - reach
    r = room * np.sqrt(rng.uniform(0.0, 1.0))
    phi = rng.uniform(0.0, 2.0 * np.pi)
    lesion_centre = (centre[0] + r * np.sin(phi), centre[1] + r * np.cos(phi))

    return PhantomGeometry(
        centre=centre,
        brain_axes=(float(major), float(minor)),
        brain_tilt=float(brain_tilt),
        lesion_centre=(float(lesion_centre[0]), float(lesion_centre[1])),
        lesion_axes=(float(lesion_major), float(lesion_minor)),
        lesion_tilt=float(rng.uniform(0.0, np.pi)),
        lobes=int(rng.integers(cfg.boundary_lobes[0], cfg.boundary_lobes[1] + 1)),
        lobe_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        amplitude=cfg.boundary_amplitude,
    )


def _ellipse_coords(size: int, centre, axes, tilt):
    """Normalized radius and polar angle of every pixel in an ellipse frame."""
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64),
                             np.arange(size, dtype=np.float64), indexing="ij")
    dr, dc = rows - centre[0], cols - centre[1]
    cos_t, sin_t = np.cos(tilt), np.sin(tilt)
    u = dr * cos_t + dc * sin_t
    v = -dr * sin_t + dc * cos_t
    un, vn = u / axes[0], v / axes[1]
    return np.hypot(un, vn), np.arctan2(vn, un)


def render_phantom(cfg: PhantomConfig, geometry: PhantomGeometry, rng: np.random.Generator):
    """Image, brain mask and lesion mask for a sampled geometry."""
    size = cfg.size
    rho, _ = _ellipse_coords(size, geometry.centre, geometry.brain_axes, geometry.brain_tilt)
    brain = rho <= 1.0

    lrho, ltheta = _ellipse_coords(size, geometry.lesion_centre, geometry.lesion_axes, geometry.lesion_tilt)
    boundary = 1.0 + geometry.amplitude * np.sin(geometry.lobes * ltheta + geometry.lobe_phase)
    lesion = (lrho <= boundary) & brain

    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64),
                             np.arange(size, dtype=np.float64), indexing="ij")
    texture = np.zeros((size, size))
    width = cfg.texture_scale * size
    brain_rows, brain_cols = np.nonzero(brain)
    for _ in range(cfg.texture_bumps):
        k = rng.integers(len(brain_rows))
        amp = rng.uniform(-1.0, 1.0)
        texture += amp * np.exp(-((rows - brain_rows[k]) ** 2 + (cols - brain_cols[k]) ** 2) / (2 * width ** 2))
    texture = np.clip(texture, -1.0, 1.0)
    tissue = 1.0 + cfg.texture_amplitude * texture

    image = np.zeros((size, size))
    image[brain] = tissue[brain]
    median = float(np.median(image[brain]))
    mottle = rng.uniform(-1.0, 1.0, size=(size, size))
    image[lesion] = (median * cfg.lesion_contrast * (1.0 + cfg.lesion_mottle * mottle))[lesion]
    return image.astype(np.float32), brain.astype(np.uint8), lesion.astype(np.uint8)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator, case_id: str = "phantom") -> CaseRecord:
    """One phantom case; severity and split are left unset."""
    geometry = sample_geometry(cfg, rng)
    image, brain, lesion = render_phantom(cfg, geometry, rng)
    return CaseRecord(case_id=case_id, image=image, brain_mask=brain, lesion_mask=lesion)


def case_id_for(index: int) -> str:
    return f"phantom_{index:04d}"


def generate_cohort(n: int, cfg: PhantomConfig, seed: int) -> List[CaseRecord]:
    """``n`` phantoms, each from its own derived stream."""
    if n < 1:
        raise ValidationError(f"cohort size must be at least 1, got {n}")
    return [generate_phantom(cfg, make_rng(seed, Stream.COHORT, i), case_id_for(i)) for i in range(n)]

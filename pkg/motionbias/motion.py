"""
Rigid in-plane motion simulation.

A motion event splits the acquisition in two: phase-encode profiles acquired
before the event see the object at rest, profiles acquired after see it
rotated and translated. The corrupted spectrum is the splice of the two, and
the ground-truth masks are never moved.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import fft

from motionbias.errors import ShapeError, ValidationError
from motionbias.kspace import (
    RotationAngle,
    Shift2D,
    fft2d,
    ifft2d,
    rotate_image,
    splice_kspace,
    translate_kspace,
)
from motionbias.tensors import SeverityCategory, as_image, as_mask


class SkullConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thickness: int = Field(default=3, ge=1)
    intensity: float = Field(default=1.2, gt=0)  # times the 99th in-brain percentile
    gap: int = Field(default=2, ge=0)


class MotionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    event_window: Tuple[float, float] = (0.2, 0.8)  # fraction of profiles
    events: int = Field(default=1, ge=1, le=8)
    profile_order: Literal["sequential", "native"] = "sequential"

    @field_validator("event_window")
    @classmethod
    def _window_in_unit_interval(cls, v):
        lo, hi = v
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"event_window must satisfy 0 <= lo < hi <= 1, got {v}")
        return v


@dataclass(frozen=True)
class MotionBounds:
    max_translation: int  # pixels
    max_rotation: int  # degrees


_SEVERITY_BOUNDS: Dict[SeverityCategory, MotionBounds] = {
    SeverityCategory.MINIMAL: MotionBounds(0, 0),
    SeverityCategory.MILD: MotionBounds(2, 1),
    SeverityCategory.MODERATE: MotionBounds(3, 2),
    SeverityCategory.SEVERE: MotionBounds(4, 3),
}


def severity_bounds(category: SeverityCategory) -> MotionBounds:
    return _SEVERITY_BOUNDS[SeverityCategory(category)]


@dataclass(frozen=True)
class MotionTrajectory:
    shift: Shift2D
    angle: RotationAngle
    event_profile: int

    @classmethod
    def identity(cls, height: int) -> "MotionTrajectory":
        return cls(Shift2D(0.0, 0.0), RotationAngle(0.0), height)

    @property
    def is_identity(self) -> bool:
        return self.shift.dx == 0 and self.shift.dy == 0 and self.angle.theta == 0

    def as_dict(self) -> Dict[str, float]:
        return {"dx": self.shift.dx, "dy": self.shift.dy,
                "angle": self.angle.theta, "event_profile": self.event_profile}


def event_range(height: int, window: Tuple[float, float] = (0.2, 0.8)) -> Tuple[int, int]:
    """Half-open integer range of profiles an event may land on."""
    lo = int(math.floor(window[0] * height))
    hi = int(math.floor(window[1] * height))
    return lo, max(hi, lo + 1)


def sample_trajectory(category: SeverityCategory, height: int, rng: np.random.Generator,
                      window: Tuple[float, float] = (0.2, 0.8)) -> MotionTrajectory:
    """Draw one motion event within the bounds of ``category``."""
    if height < 4:
        raise ValidationError(f"image height must be at least 4, got {height}")
    bounds = severity_bounds(category)
    if bounds.max_translation == 0 and bounds.max_rotation == 0:
        return MotionTrajectory.identity(height)
    t, r = bounds.max_translation, bounds.max_rotation
    dx = float(rng.uniform(-t, t))
    dy = float(rng.uniform(-t, t))
    angle = float(rng.uniform(-r, r))
    lo, hi = event_range(height, window)
    profile = int(rng.integers(lo, hi))
    return MotionTrajectory(Shift2D(dx, dy), RotationAngle(angle), profile)


def sample_trajectories(category: SeverityCategory, height: int, rng: np.random.Generator,
                        cfg: MotionConfig = MotionConfig()) -> List[MotionTrajectory]:
    """Draw ``cfg.events`` events, sorted by acquisition time."""
    events = [sample_trajectory(category, height, rng, cfg.event_window) for _ in range(cfg.events)]
    return sorted(events, key=lambda e: e.event_profile)


def skull_ring(brain_mask, cfg: SkullConfig) -> np.ndarray:
    """Elliptical annulus ``cfg.gap`` pixels outside the brain, ``cfg.thickness`` wide.

    The ellipse comes from the second moments of the brain mask: a uniform
    ellipse with semi-axis a has variance a**2 / 4 along that axis.
    """
    brain = as_mask(brain_mask).astype(bool)
    if not brain.any():
        raise ValidationError("brain mask is empty; cannot place a skull")
    rows, cols = np.nonzero(brain)
    centre = np.array([rows.mean(), cols.mean()])
    coords = np.stack([rows, cols]).astype(np.float64)
    cov = np.cov(coords, bias=True)
    variances, axes = np.linalg.eigh(cov)
    semi = np.maximum(2.0 * np.sqrt(np.maximum(variances, 0.0)), 0.5)

    grid = np.stack(np.meshgrid(np.arange(brain.shape[0]), np.arange(brain.shape[1]),
                                indexing="ij"), axis=-1).astype(np.float64)
    projected = (grid - centre) @ axes  # (H, W, 2) in principal-axis frame

    def inside(offset: float) -> np.ndarray:
        return np.sum((projected / (semi + offset)) ** 2, axis=-1) <= 1.0

    return inside(cfg.gap + cfg.thickness) & ~inside(cfg.gap) & ~brain


def add_skull(image, brain_mask, cfg: SkullConfig = SkullConfig()) -> np.ndarray:
    """Paint a bright skull ring around a skull-stripped slice."""
    image = as_image(image)
    brain = as_mask(brain_mask).astype(bool)
    if brain.shape != image.shape:
        raise ShapeError(f"brain mask {brain.shape} does not match image {image.shape}")
    ring = skull_ring(brain, cfg)
    out = image.copy()
    out[ring] = cfg.intensity * np.percentile(image[brain], 99)
    return out


def _splice_acquired(pre: np.ndarray, post: np.ndarray, event_profile: int, profile_order: str) -> np.ndarray:
    if profile_order == "native":
        return splice_kspace(pre, post, event_profile)
    # sequential readout walks ky from most negative to most positive
    spliced = splice_kspace(fft.fftshift(pre, axes=0), fft.fftshift(post, axes=0), event_profile)
    return fft.ifftshift(spliced, axes=0)


def moved_kspace(image, shift: Shift2D, angle: RotationAngle) -> np.ndarray:
    """Spectrum of the object after the event: rotate in image space, then phase-ramp."""
    return translate_kspace(fft2d(rotate_image(image, angle)), shift)


def corrupt_kspace_events(image, trajectories: Sequence[MotionTrajectory],
                          profile_order: str = "sequential") -> np.ndarray:
    """Spliced spectrum for a sequence of events with cumulative poses."""
    image = as_image(image)
    spectrum = fft2d(image)
    dx = dy = theta = 0.0
    for event in sorted(trajectories, key=lambda e: e.event_profile):
        if event.is_identity:
            continue
        dx += event.shift.dx
        dy += event.shift.dy
        theta += event.angle.theta
        post = moved_kspace(image, Shift2D(dx, dy), RotationAngle(theta))
        spectrum = _splice_acquired(spectrum, post, event.event_profile, profile_order)
    return spectrum


def corrupt_kspace(image, trajectory: MotionTrajectory, profile_order: str = "sequential") -> np.ndarray:
    return corrupt_kspace_events(image, [trajectory], profile_order)


def corrupt_image(image, trajectory: MotionTrajectory, profile_order: str = "sequential") -> np.ndarray:
    """Motion-corrupted image for a single event; labels are left to the caller untouched."""
    return ifft2d(corrupt_kspace(image, trajectory, profile_order))


def corrupt_image_events(image, trajectories: Sequence[MotionTrajectory],
                         profile_order: str = "sequential") -> np.ndarray:
    return ifft2d(corrupt_kspace_events(image, trajectories, profile_order))


def rmse(a, b) -> float:
    return float(np.sqrt(np.mean((as_image(a) - as_image(b)) ** 2)))

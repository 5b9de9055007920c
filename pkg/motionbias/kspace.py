"""
Fourier transforms and rigid-motion operators in k-space.

Spectra use the unshifted DFT layout (DC at index (0, 0)); frequencies are
read in the signed convention of ``fftfreq``. The forward transform is
unnormalized and the inverse carries the 1/(H*W) factor.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import fft, ndimage

from motionbias.errors import ShapeError, ValidationError
from motionbias.logger import logger
from motionbias.tensors import as_image, as_kspace


@dataclass(frozen=True)
class Shift2D:
    dx: float = 0.0  # columns
    dy: float = 0.0  # rows

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy)):
            raise ValidationError(f"shift must be finite, got ({self.dx}, {self.dy})")


@dataclass(frozen=True)
class RotationAngle:
    theta: float = 0.0  # degrees, normalized to (-180, 180]

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise ValidationError(f"rotation angle must be finite, got {self.theta}")
        theta = float(self.theta) % 360.0
        if theta > 180.0:
            theta -= 360.0
        object.__setattr__(self, "theta", theta)


def fft2d(image) -> np.ndarray:
    """Unnormalized forward 2-D DFT of a real image."""
    return fft.fft2(as_image(image))


def ifft2d_with_residue(kspace) -> Tuple[np.ndarray, float]:
    """Inverse DFT; returns the real part and the largest discarded imaginary magnitude."""
    spatial = fft.ifft2(as_kspace(kspace))
    residue = float(np.max(np.abs(spatial.imag))) if spatial.size else 0.0
    return spatial.real.copy(), residue


def ifft2d(kspace) -> np.ndarray:
    """Normalized inverse 2-D DFT, real part only."""
    image, residue = ifft2d_with_residue(kspace)
    logger.kspace_residue(residue)
    return image


def phase_ramp(shape: Tuple[int, int], shift: Shift2D) -> np.ndarray:
    """exp(-2*pi*i*(kx*dx/W + ky*dy/H)) on signed frequencies."""
    height, width = shape
    fy = fft.fftfreq(height)[:, None]
    fx = fft.fftfreq(width)[None, :]
    return np.exp(-2j * np.pi * (fx * shift.dx + fy * shift.dy))


def translate_kspace(kspace, shift: Shift2D) -> np.ndarray:
    """Apply an image-domain translation as a k-space phase ramp."""
    kspace = as_kspace(kspace)
    if shift.dx == 0 and shift.dy == 0:
        return kspace.copy()
    return kspace * phase_ramp(kspace.shape, shift)


def rotation_source_coords(shape: Tuple[int, int], theta_deg: float) -> np.ndarray:
    """Input (row, col) sampled by each output pixel for a counter-clockwise rotation.

    Rotation is about ((H-1)/2, (W-1)/2) with rows pointing down, so a point
    at (x, y) = (c - cc, cr - r) moves to (x cos t - y sin t, x sin t + y cos t).
    """
    height, width = shape
    cr, cc = (height - 1) / 2.0, (width - 1) / 2.0
    theta = np.deg2rad(theta_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
    x = cols - cc
    y = cr - rows
    # inverse rotation takes output coordinates back to the source
    xs = x * cos_t + y * sin_t
    ys = -x * sin_t + y * cos_t
    return np.stack([cr - ys, cc + xs])


def rotate_image(image, angle: RotationAngle) -> np.ndarray:
    """Bilinear rotation about the image centre; samples outside the grid read 0."""
    image = as_image(image)
    if angle.theta == 0.0:
        return image.copy()
    coords = rotation_source_coords(image.shape, angle.theta)
    return ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)


def splice_kspace(pre, post, event_profile: int) -> np.ndarray:
    """Rows before ``event_profile`` from ``pre``, the rest from ``post``."""
    pre = as_kspace(pre)
    post = as_kspace(post)
    if pre.shape != post.shape:
        raise ShapeError(f"cannot splice k-space grids of shapes {pre.shape} and {post.shape}")
    height = pre.shape[0]
    if not 0 <= event_profile <= height:
        raise ValidationError(f"event profile {event_profile} outside [0, {height}]")
    out = post.copy()
    out[:event_profile] = pre[:event_profile]
    return out


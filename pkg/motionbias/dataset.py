"""
Cohort bookkeeping and per-slice preprocessing.

Cases are split into four motion categories and each category into
train/val/test; slices are normalized on brain statistics, zero-padded, and
training pairs go through the augmentation menu.
"""
import math
from dataclasses import replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from skimage.restoration import denoise_bilateral

from motionbias.errors import ValidationError
from motionbias.tensors import CaseRecord, SeverityCategory, Split, as_image, as_mask

REFERENCE_CATEGORY_SIZES: Dict[SeverityCategory, int] = {
    SeverityCategory.MINIMAL: 64,
    SeverityCategory.MILD: 64,
    SeverityCategory.MODERATE: 64,
    SeverityCategory.SEVERE: 67,
}


# ---------------------------------------------------------------------------
# Categories and splits
# ---------------------------------------------------------------------------

def largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """Integer apportionment of ``total`` proportional to ``weights``; ties go to earlier entries."""
    weight_sum = float(sum(weights))
    quotas = [total * w / weight_sum for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def scaled_category_sizes(total: int) -> Dict[SeverityCategory, int]:
    """Reference category sizes scaled to a cohort of ``total`` cases."""
    counts = largest_remainder(total, list(REFERENCE_CATEGORY_SIZES.values()))
    return dict(zip(REFERENCE_CATEGORY_SIZES, counts))


def assign_categories(cases: Sequence[CaseRecord], rng: np.random.Generator,
                      sizes: Optional[Sequence[int]] = None) -> List[CaseRecord]:
    """Random disjoint partition of ``cases`` into the four severity categories.

    Without ``sizes`` the reference 64/64/64/67 proportions are scaled to the
    cohort. Cases come back in their input order.
    """
    if sizes is None:
        counts = list(scaled_category_sizes(len(cases)).values())
    else:
        counts = list(sizes)
        if len(counts) != len(SeverityCategory) or sum(counts) != len(cases):
            raise ValidationError(
                f"category sizes {counts} do not partition {len(cases)} cases into 4 categories"
            )
    labels = np.repeat(np.arange(len(SeverityCategory)), counts)
    perm = rng.permutation(len(cases))
    categories = list(SeverityCategory)
    assigned: List[Optional[CaseRecord]] = [None] * len(cases)
    for slot, case_index in enumerate(perm):
        assigned[case_index] = replace(cases[case_index], severity=categories[labels[slot]])
    return assigned


class SplitCounts(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: int = Field(ge=0)
    val: int = Field(ge=0)
    test: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.train + self.val + self.test


class SplitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    counts: Dict[SeverityCategory, SplitCounts] = {
        SeverityCategory.MINIMAL: SplitCounts(train=38, val=6, test=20),
        SeverityCategory.MILD: SplitCounts(train=38, val=6, test=20),
        SeverityCategory.MODERATE: SplitCounts(train=38, val=6, test=20),
        SeverityCategory.SEVERE: SplitCounts(train=40, val=6, test=21),
    }

    @model_validator(mode="after")
    def _all_categories(self):
        missing = [c.value for c in SeverityCategory if c not in self.counts]
        if missing:
            raise ValueError(f"split counts missing for {missing}")
        return self

    def counts_for(self, category: SeverityCategory, n: int) -> SplitCounts:
        """Counts for a category of ``n`` cases, scaled when ``n`` differs from the spec."""
        base = self.counts[category]
        if base.total == n:
            return base
        train, val, test = largest_remainder(n, [base.train, base.val, base.test])
        # every split must be populated once the category can afford it
        parts = [train, val, test]
        if n >= 3:
            for i in range(3):
                if parts[i] == 0:
                    donor = max(range(3), key=lambda j: parts[j])
                    parts[donor] -= 1
                    parts[i] += 1
        return SplitCounts(train=parts[0], val=parts[1], test=parts[2])


def assign_splits(cases: Sequence[CaseRecord], counts: SplitCounts,
                  rng: np.random.Generator) -> List[CaseRecord]:
    """Random train/val/test split of one category, returned in input order."""
    if counts.total != len(cases):
        raise ValidationError(
            f"split counts {counts.train}/{counts.val}/{counts.test} do not sum to {len(cases)} cases"
        )
    labels = [Split.TRAIN] * counts.train + [Split.VAL] * counts.val + [Split.TEST] * counts.test
    perm = rng.permutation(len(cases))
    out: List[Optional[CaseRecord]] = [None] * len(cases)
    for slot, case_index in enumerate(perm):
        out[case_index] = replace(cases[case_index], split=labels[slot])
    return out


def assign_all_splits(cases: Sequence[CaseRecord], rng: np.random.Generator,
                      spec: Optional[SplitSpec] = None, strict: bool = False) -> List[CaseRecord]:
    """Split every category; ``strict`` requires category sizes to match ``spec`` exactly."""
    spec = spec or SplitSpec()
    by_id = {}
    for category in SeverityCategory:
        members = [c for c in cases if c.severity == category]
        if not members:
            continue
        if strict and spec.counts[category].total != len(members):
            raise ValidationError(
                f"{category.value}: {len(members)} cases but split spec sums to {spec.counts[category].total}"
            )
        for case in assign_splits(members, spec.counts_for(category, len(members)), rng):
            by_id[case.case_id] = case
    missing = [c.case_id for c in cases if c.case_id not in by_id]
    if missing:
        raise ValidationError(f"cases without severity cannot be split: {missing[:3]}")
    return [by_id[c.case_id] for c in cases]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def normalize_in_brain(image, brain_mask) -> np.ndarray:
    """Zero mean, unit (population) std over brain pixels, applied to the whole slice."""
    image = as_image(image)
    brain = as_mask(brain_mask).astype(bool)
    if not brain.any():
        raise ValidationError("brain mask is empty; cannot normalize")
    values = image[brain]
    mean = values.mean()
    std = values.std()
    if std < 1e-8:
        std = 1.0
    return (image - mean) / std


def pad_to(grid, target: Union[int, Tuple[int, int]]) -> np.ndarray:
    """Centered zero padding; odd remainders go to the bottom/right."""
    grid = np.asarray(grid)
    th, tw = (target, target) if isinstance(target, int) else target
    height, width = grid.shape
    if height > th or width > tw:
        raise ValidationError(f"grid {grid.shape} is larger than pad target {(th, tw)}")
    top = (th - height) // 2
    left = (tw - width) // 2
    return np.pad(grid, ((top, th - height - top), (left, tw - width - left)), mode="constant")


def preprocess_case(case: CaseRecord, pad_target: Optional[int] = None) -> CaseRecord:
    image = normalize_in_brain(case.image, case.brain_mask)
    brain, lesion = case.brain_mask, case.lesion_mask
    if pad_target is not None:
        image, brain, lesion = pad_to(image, pad_target), pad_to(brain, pad_target), pad_to(lesion, pad_target)
    return replace(case, image=image, brain_mask=brain, lesion_mask=lesion)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

class AugmentKind(str, Enum):
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    GAMMA = "gamma"
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    MEDIAN_BLUR = "median_blur"
    BILATERAL_BLUR = "bilateral_blur"
    CROP = "crop"
    AFFINE = "affine"


GEOMETRIC_KINDS = frozenset({AugmentKind.FLIP_H, AugmentKind.FLIP_V, AugmentKind.CROP, AugmentKind.AFFINE})


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    kinds: List[AugmentKind] = list(AugmentKind)
    probability: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma_range: Tuple[float, float] = (0.7, 1.5)
    noise_fraction_range: Tuple[float, float] = (0.0, 0.1)  # sigma as fraction of intensity range
    blur_kernels: List[int] = [3, 5]
    bilateral_sigma_color: float = Field(default=0.1, gt=0.0)
    crop_area_range: Tuple[float, float] = (0.85, 1.0)
    affine_rotation: float = Field(default=10.0, ge=0.0)  # degrees
    affine_scale: float = Field(default=0.05, ge=0.0, lt=1.0)
    affine_shear: float = Field(default=0.05, ge=0.0)


def _intensity_range(image: np.ndarray):
    lo, hi = float(image.min()), float(image.max())
    return lo, hi


def _gamma(image, rng, cfg):
    g = rng.uniform(*cfg.gamma_range)
    lo, hi = _intensity_range(image)
    if hi - lo < 1e-12:
        return image.copy()
    return lo + (hi - lo) * ((image - lo) / (hi - lo)) ** g


def _gaussian_noise(image, rng, cfg):
    lo, hi = _intensity_range(image)
    sigma = rng.uniform(*cfg.noise_fraction_range) * (hi - lo)
    return image + rng.normal(0.0, 1.0, size=image.shape) * sigma


def _kernel(rng, cfg) -> int:
    return int(cfg.blur_kernels[rng.integers(len(cfg.blur_kernels))])


def _gaussian_blur(image, rng, cfg):
    k = _kernel(rng, cfg)
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    return ndimage.gaussian_filter(image, sigma=sigma, truncate=(k // 2) / sigma, mode="reflect")


def _median_blur(image, rng, cfg):
    return ndimage.median_filter(image, size=_kernel(rng, cfg), mode="reflect")


def _bilateral_blur(image, rng, cfg):
    k = _kernel(rng, cfg)
    lo, hi = _intensity_range(image)
    if hi - lo < 1e-12:
        return image.copy()
    unit = (image - lo) / (hi - lo)
    smoothed = denoise_bilateral(unit, win_size=k, sigma_color=cfg.bilateral_sigma_color,
                                 sigma_spatial=k / 3.0, mode="edge")
    return lo + (hi - lo) * smoothed


def _crop(image, mask, rng, cfg):
    height, width = image.shape
    side = math.sqrt(rng.uniform(*cfg.crop_area_range))
    ch, cw = side * height, side * width
    r0 = rng.uniform(0.0, height - ch)
    c0 = rng.uniform(0.0, width - cw)
    rows = r0 + (np.arange(height) + 0.5) * ch / height - 0.5
    cols = c0 + (np.arange(width) + 0.5) * cw / width - 0.5
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    out_image = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="nearest")
    return out_image, out_mask


def _affine(image, mask, rng, cfg):
    theta = np.deg2rad(rng.uniform(-cfg.affine_rotation, cfg.affine_rotation))
    scale = rng.uniform(1.0 - cfg.affine_scale, 1.0 + cfg.affine_scale)
    shear = rng.uniform(-cfg.affine_shear, cfg.affine_shear)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    forward = scale * rotation @ np.array([[1.0, shear], [0.0, 1.0]])
    inverse = np.linalg.inv(forward)
    centre = (np.array(image.shape, dtype=np.float64) - 1.0) / 2.0
    offset = centre - inverse @ centre
    out_image = ndimage.affine_transform(image, inverse, offset=offset, order=1, mode="nearest")
    out_mask = ndimage.affine_transform(mask, inverse, offset=offset, order=0, mode="constant", cval=0)
    return out_image, out_mask


_PHOTOMETRIC = {
    AugmentKind.GAMMA: _gamma,
    AugmentKind.GAUSSIAN_NOISE: _gaussian_noise,
    AugmentKind.GAUSSIAN_BLUR: _gaussian_blur,
    AugmentKind.MEDIAN_BLUR: _median_blur,
    AugmentKind.BILATERAL_BLUR: _bilateral_blur,
}


def augment(image, mask, kind: AugmentKind, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one augmentation to an (image, mask) pair.

    Geometric kinds move both grids (nearest-neighbour for the mask);
    photometric kinds return the mask unchanged.
    """
    image = as_image(image)
    mask = as_mask(mask)
    kind = AugmentKind(kind)
    if kind == AugmentKind.FLIP_H:
        return image[:, ::-1].copy(), mask[:, ::-1].copy()
    if kind == AugmentKind.FLIP_V:
        return image[::-1, :].copy(), mask[::-1, :].copy()
    if kind == AugmentKind.CROP:
        return _crop(image, mask, rng, cfg)
    if kind == AugmentKind.AFFINE:
        return _affine(image, mask, rng, cfg)
    return _PHOTOMETRIC[kind](image, rng, cfg), mask.copy()


def augment_random(image, mask, rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Each configured kind fires independently with ``cfg.probability``, in menu order."""
    image, mask = as_image(image), as_mask(mask)
    if not cfg.enabled:
        return image, mask
    for kind in cfg.kinds:
        if rng.uniform() < cfg.probability:
            image, mask = augment(image, mask, kind, rng, cfg)
    return image, mask

from collections import Counter

import numpy as np
import pytest

from motionbias.dataset import (
    AugmentConfig,
    AugmentKind,
    GEOMETRIC_KINDS,
    SplitCounts,
    SplitSpec,
    assign_all_splits,
    assign_categories,
    assign_splits,
    augment,
    augment_random,
    largest_remainder,
    normalize_in_brain,
    pad_to,
    preprocess_case,
    scaled_category_sizes,
)
from motionbias.errors import ValidationError
from motionbias.phantom import PhantomConfig, generate_cohort
from motionbias.rng import Stream, make_rng
from motionbias.tensors import SeverityCategory, Split

S = SeverityCategory


def test_largest_remainder():
    assert largest_remainder(10, [1, 1, 1]) == [4, 3, 3]
    assert sum(largest_remainder(17, [38, 6, 20])) == 17


def test_reference_sizes_are_kept_at_full_scale():
    assert list(scaled_category_sizes(259).values()) == [64, 64, 64, 67]
    assert list(scaled_category_sizes(16).values()) == [4, 4, 4, 4]


def test_categories_partition_the_cohort(labeled_cohort):
    counts = Counter(c.severity for c in labeled_cohort)
    assert counts == {S.MINIMAL: 4, S.MILD: 4, S.MODERATE: 4, S.SEVERE: 4}
    assert [c.case_id for c in labeled_cohort] == [f"phantom_{i:04d}" for i in range(16)]


def test_category_assignment_is_seeded():
    cases = generate_cohort(8, PhantomConfig(size=32), seed=3)
    a = assign_categories(cases, make_rng(3, Stream.CATEGORIES))
    b = assign_categories(cases, make_rng(3, Stream.CATEGORIES))
    assert [c.severity for c in a] == [c.severity for c in b]


def test_explicit_sizes_must_partition():
    cases = generate_cohort(4, PhantomConfig(size=32), seed=1)
    assert Counter(c.severity for c in assign_categories(cases, make_rng(0), [1, 1, 1, 1])) == \
        {s: 1 for s in S}
    with pytest.raises(ValidationError):
        assign_categories(cases, make_rng(0), [2, 2, 2, 2])


def test_split_counts_scaling():
    spec = SplitSpec()
    assert spec.counts_for(S.MINIMAL, 64) == SplitCounts(train=38, val=6, test=20)
    assert spec.counts_for(S.SEVERE, 67) == SplitCounts(train=40, val=6, test=21)
    small = spec.counts_for(S.MINIMAL, 4)
    assert (small.train, small.val, small.test) == (2, 1, 1)


def test_assign_splits_exact_counts(labeled_cohort):
    members = [c for c in labeled_cohort if c.severity == S.MILD]
    out = assign_splits(members, SplitCounts(train=2, val=1, test=1), make_rng(2))
    assert Counter(c.split for c in out) == {Split.TRAIN: 2, Split.VAL: 1, Split.TEST: 1}
    with pytest.raises(ValidationError):
        assign_splits(members, SplitCounts(train=1, val=1, test=1), make_rng(2))


def test_assign_all_splits_per_category(labeled_cohort):
    out = assign_all_splits(labeled_cohort, make_rng(7, Stream.SPLITS))
    for category in S:
        splits = Counter(c.split for c in out if c.severity == category)
        assert splits == {Split.TRAIN: 2, Split.VAL: 1, Split.TEST: 1}
    with pytest.raises(ValidationError):
        assign_all_splits(labeled_cohort, make_rng(0), strict=True)


def test_unlabeled_cases_cannot_be_split():
    cases = generate_cohort(3, PhantomConfig(size=32), seed=1)
    with pytest.raises(ValidationError):
        assign_all_splits(cases, make_rng(0))


def test_normalize_in_brain(phantom_case):
    out = normalize_in_brain(phantom_case.image, phantom_case.brain_mask)
    values = out[phantom_case.brain_mask.astype(bool)]
    assert values.mean() == pytest.approx(0.0, abs=1e-9)
    assert values.std() == pytest.approx(1.0, abs=1e-9)


def test_normalize_constant_brain_only_centres():
    brain = np.ones((4, 4), dtype=np.uint8)
    np.testing.assert_allclose(normalize_in_brain(np.full((4, 4), 3.0), brain), 0.0)
    with pytest.raises(ValidationError):
        normalize_in_brain(np.ones((4, 4)), np.zeros((4, 4), dtype=np.uint8))


def test_pad_to_centres_and_rejects_larger():
    padded = pad_to(np.ones((3, 5)), 8)
    assert padded.shape == (8, 8)
    assert padded[2:5, 1:6].all()
    assert padded.sum() == 15
    with pytest.raises(ValidationError):
        pad_to(np.ones((9, 4)), 8)


def test_preprocess_pads_all_grids(phantom_case):
    out = preprocess_case(phantom_case, pad_target=72)
    assert out.image.shape == out.brain_mask.shape == out.lesion_mask.shape == (72, 72)
    assert out.lesion_mask.sum() == phantom_case.lesion_mask.sum()


@pytest.mark.parametrize("kind", list(AugmentKind))
def test_augment_shapes_and_binary_masks(phantom_case, kind):
    image, mask = augment(phantom_case.image, phantom_case.lesion_mask, kind, make_rng(1))
    assert image.shape == mask.shape == (64, 64)
    assert set(np.unique(mask)) <= {0, 1}
    assert np.all(np.isfinite(image))
    if kind not in GEOMETRIC_KINDS:
        np.testing.assert_array_equal(mask, phantom_case.lesion_mask)


def test_flips_move_image_and_mask_together(phantom_case):
    image, mask = augment(phantom_case.image, phantom_case.lesion_mask, AugmentKind.FLIP_H, make_rng(0))
    np.testing.assert_array_equal(image, phantom_case.image[:, ::-1])
    np.testing.assert_array_equal(mask, phantom_case.lesion_mask[:, ::-1])


def test_gamma_preserves_intensity_range(phantom_case):
    image, _ = augment(phantom_case.image, phantom_case.lesion_mask, AugmentKind.GAMMA, make_rng(3))
    assert image.min() == pytest.approx(phantom_case.image.min())
    assert image.max() == pytest.approx(phantom_case.image.max())


def test_augment_random_disabled_and_seeded(phantom_case):
    off = AugmentConfig(enabled=False)
    image, mask = augment_random(phantom_case.image, phantom_case.lesion_mask, make_rng(0), off)
    np.testing.assert_array_equal(image, phantom_case.image)
    a = augment_random(phantom_case.image, phantom_case.lesion_mask, make_rng(5))
    b = augment_random(phantom_case.image, phantom_case.lesion_mask, make_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_flip_h_twice_is_identity(phantom_case):
    once = augment(phantom_case.image, phantom_case.lesion_mask, AugmentKind.FLIP_H, make_rng(0))
    image, mask = augment(*once, AugmentKind.FLIP_H, make_rng(0))
    np.testing.assert_array_equal(image, phantom_case.image)
    np.testing.assert_array_equal(mask, phantom_case.lesion_mask)


def test_median_blur_removes_an_impulse():
    image = np.zeros((9, 9))
    image[4, 4] = 10.0
    mask = np.zeros((9, 9), dtype=np.uint8)
    out, _ = augment(image, mask, AugmentKind.MEDIAN_BLUR, make_rng(0), AugmentConfig(blur_kernels=[3]))
    assert out[4, 4] == np.median(image[3:6, 3:6]) == 0.0
    assert not np.any(out)


@pytest.mark.parametrize("a,b", [(3.5, -2.0), (0.01, 100.0)])
def test_normalize_ignores_affine_rescaling(phantom_case, a, b):
    base = normalize_in_brain(phantom_case.image, phantom_case.brain_mask)
    scaled = normalize_in_brain(a * phantom_case.image.astype(np.float64) + b, phantom_case.brain_mask)
    np.testing.assert_allclose(scaled, base, atol=1e-6)


def _disk_lesion(size=64, radius=8):
    rows, cols = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    mask = ((rows - centre) ** 2 + (cols - centre) ** 2 <= radius ** 2).astype(np.uint8)
    image = 1.0 + mask * 0.8
    return image, mask


@pytest.mark.parametrize("kind", [AugmentKind.CROP, AugmentKind.AFFINE])
def test_geometric_kinds_keep_lesion_area_over_many_seeds(kind):
    image, mask = _disk_lesion()
    before = mask.sum()
    ratios = [augment(image, mask, kind, make_rng(seed))[1].sum() / before for seed in range(200)]
    assert max(abs(r - 1.0) for r in ratios) <= 0.25

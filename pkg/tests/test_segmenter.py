import json

import numpy as np
import pytest

from motionbias.curriculum import OrderingStrategy
from motionbias.dataset import AugmentConfig, assign_all_splits, preprocess_case
from motionbias.errors import ShapeError, ValidationError
from motionbias.rng import Stream, make_rng
from motionbias.segmenter import (
    PARAM_SHAPES,
    AdamState,
    EarlyStopping,
    TrainConfig,
    TrainLog,
    adam_step,
    backward,
    batch_loss,
    describe,
    fit,
    forward,
    init_params,
    load_checkpoint,
    parameter_count,
    predict_mask,
    predict_masks,
    save_checkpoint,
    soft_dice_loss,
    zero_params,
)
from motionbias.stats import dice_score
from motionbias.tensors import Split


def test_parameter_count_follows_topology():
    assert parameter_count() == 7058
    assert [name for name, _ in describe()] == list(PARAM_SHAPES)


def test_init_is_seeded_and_float32():
    a = init_params(make_rng(7, Stream.INIT))
    b = init_params(make_rng(7, Stream.INIT))
    for name, shape in PARAM_SHAPES.items():
        assert a[name].shape == shape
        assert a[name].dtype == np.float32
        np.testing.assert_array_equal(a[name], b[name])
    assert not a["enc1.bias"].any()


def test_forward_shapes_and_normalization(phantom_case):
    probs = forward(init_params(make_rng(1)), phantom_case.image)
    assert probs.shape == (64, 64, 2)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_zero_weights_give_uniform_probabilities():
    probs = forward(zero_params(), np.random.default_rng(0).normal(size=(8, 8)))
    np.testing.assert_allclose(probs, 0.5)


def test_forward_rejects_indivisible_dims():
    with pytest.raises(ShapeError):
        forward(zero_params(), np.zeros((10, 12)))


def test_soft_dice_loss_values():
    target = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    assert soft_dice_loss(target.astype(float), target) == pytest.approx(0.0, abs=1e-9)
    assert soft_dice_loss(np.zeros((2, 2)), np.zeros((2, 2))) == pytest.approx(0.0, abs=1e-12)
    assert soft_dice_loss(np.full((2, 2), 0.5), target) == pytest.approx(0.25, abs=1e-9)
    with pytest.raises(ShapeError):
        soft_dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_soft_dice_loss_is_bounded():
    rng = np.random.default_rng(4)
    for _ in range(20):
        loss = soft_dice_loss(rng.uniform(size=(6, 6)), rng.integers(0, 2, size=(6, 6)))
        assert 0.0 <= loss <= 1.0


def test_gradients_match_central_differences():
    rng = np.random.default_rng(11)
    image = rng.normal(size=(8, 8))
    target = (rng.uniform(size=(8, 8)) < 0.4).astype(np.uint8)
    params = {k: v.astype(np.float64) for k, v in init_params(make_rng(11, Stream.INIT)).items()}
    analytic = backward(params, image, target)
    h = 1e-5
    for name, value in params.items():
        assert analytic[name].shape == value.shape
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + h
            plus = batch_loss(params, image[None], target[None])
            value[index] = original - h
            minus = batch_loss(params, image[None], target[None])
            value[index] = original
            numeric = (plus - minus) / (2 * h)
            a = analytic[name][index]
            err = abs(a - numeric)
            assert err < 1e-7 or err / max(abs(a), abs(numeric), 1e-8) < 1e-3, (name, index, a, numeric)


def test_gradients_are_deterministic(phantom_case):
    params = init_params(make_rng(3))
    a = backward(params, phantom_case.image, phantom_case.lesion_mask)
    b = backward(params, phantom_case.image, phantom_case.lesion_mask)
    for name in PARAM_SHAPES:
        np.testing.assert_array_equal(a[name], b[name])


def test_adam_zero_gradient_keeps_params():
    params = init_params(make_rng(0))
    grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    updated, state = adam_step(params, grads, AdamState.fresh(params))
    for name in PARAM_SHAPES:
        np.testing.assert_array_equal(updated[name], params[name])
    assert state.t == 1


def test_adam_first_step_by_hand():
    params = {"w": np.array([0.0])}
    updated, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.fresh(params, lr=0.001))
    assert updated["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert params["w"][0] == 0.0


def test_adam_momentum_warmup():
    params = {"w": np.array([0.0])}
    one, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.fresh(params, lr=0.002))

    # with bias correction a constant gradient gives two equal steps
    state = AdamState.fresh(params, lr=0.001)
    p1, state = adam_step(params, {"w": np.array([1.0])}, state)
    p2, state = adam_step(p1, {"w": np.array([1.0])}, state)
    assert p2["w"][0] == pytest.approx(one["w"][0], rel=1e-9)

    state = AdamState.fresh(params, lr=0.001)
    q1, state = adam_step(params, {"w": np.array([1.0])}, state)
    q2, state = adam_step(q1, {"w": np.array([3.0])}, state)
    assert q2["w"][0] != pytest.approx(2 * q1["w"][0], rel=1e-3)
    assert state.t == 2


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(4)}, AdamState.fresh(params))


def test_early_stopping_patience():
    stopper = EarlyStopping(patience=7)
    stopped = None
    for epoch, loss in enumerate([1.0, 0.9] + [0.9] * 7 + [0.5], 1):
        stopper.update(epoch, loss)
        if stopper.should_stop:
            stopped = epoch
            break
    assert stopped == 9
    assert stopper.best_epoch == 2


def test_early_stopping_requires_strict_improvement():
    stopper = EarlyStopping(patience=2, min_delta=1e-6)
    assert stopper.update(1, 1.0)
    assert not stopper.update(2, 1.0 - 5e-7)


def test_predict_mask_ties_go_to_background():
    mask = predict_mask(zero_params(), np.ones((8, 8)))
    assert mask.dtype == np.uint8
    assert not mask.any()


def _threshold_params():
    """Lesion logit = relu(image), background logit = 0.5."""
    params = zero_params(np.float64)
    params["enc1.weight"][0, 0, 1, 1] = 1.0
    params["dec2.weight"][0, 8, 1, 1] = 1.0
    params["head.weight"][1, 0, 0, 0] = 1.0
    params["head.bias"][0] = 0.5
    return params


def test_predict_mask_recovers_confident_region():
    region = np.zeros((16, 16), dtype=np.uint8)
    region[4:9, 6:12] = 1
    np.testing.assert_array_equal(predict_mask(_threshold_params(), region.astype(float)), region)


def test_predict_masks_thread_count_does_not_change_results(labeled_cohort):
    params = init_params(make_rng(2))
    images = [c.image for c in labeled_cohort[:5]]
    serial = predict_masks(params, images, threads=1)
    parallel = predict_masks(params, images, threads=3)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(make_rng(5))
    save_checkpoint(tmp_path / "ckpt", params, extra={"arm": "test"})
    index = json.loads((tmp_path / "ckpt" / "index.json").read_text())
    assert [t["name"] for t in index["tensors"]] == list(PARAM_SHAPES)
    loaded = load_checkpoint(tmp_path / "ckpt")
    for name in PARAM_SHAPES:
        np.testing.assert_array_equal(loaded[name], params[name])
    index["format_version"] = 2
    (tmp_path / "ckpt" / "index.json").write_text(json.dumps(index))
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "ckpt")


def test_train_config_bounds():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainLog(train_loss=[1.0], val_loss=[])
    with pytest.raises(ValueError):
        TrainLog(train_loss=[1.0], val_loss=[1.0], wall_time=[0.1, 0.2])


def _prepared(cohort):
    cases = assign_all_splits(cohort, make_rng(7, Stream.SPLITS))
    cases = [preprocess_case(c) for c in cases]
    return ([c for c in cases if c.split == Split.TRAIN], [c for c in cases if c.split == Split.VAL],
            [c for c in cases if c.split == Split.TEST])


def test_fit_requires_data(labeled_cohort):
    train, val, _ = _prepared(labeled_cohort)
    with pytest.raises(ValidationError):
        fit([], val, TrainConfig(max_epochs=1))
    with pytest.raises(ValidationError):
        fit(train, [], TrainConfig(max_epochs=1))


def test_single_epoch(labeled_cohort):
    train, val, _ = _prepared(labeled_cohort)
    params, log = fit(train, val, TrainConfig(max_epochs=1, batch_size=4))
    assert log.stopped_epoch == 1 and log.best_epoch == 1
    assert len(log.train_loss) == len(log.val_loss) == len(log.wall_time) == 1
    assert "wall_time" not in log.model_dump_json()
    assert TrainLog.model_validate_json(log.model_dump_json()).wall_time == []
    assert set(params) == set(PARAM_SHAPES)


def test_fit_is_reproducible(labeled_cohort):
    train, val, _ = _prepared(labeled_cohort)
    cfg = TrainConfig(max_epochs=2, batch_size=4, strategy=OrderingStrategy.CURRICULUM, seed=3)
    p1, log1 = fit(train, val, cfg)
    p2, log2 = fit(train, val, cfg)
    assert log1.train_loss == log2.train_loss
    assert log1.val_loss == log2.val_loss
    for name in PARAM_SHAPES:
        np.testing.assert_array_equal(p1[name], p2[name])


def test_fit_returns_best_epoch_params(labeled_cohort):
    train, val, _ = _prepared(labeled_cohort)
    params, log = fit(train, val, TrainConfig(max_epochs=3, batch_size=4, lr=5e-2, patience=1))
    assert log.best_epoch <= log.stopped_epoch
    best = log.val_loss[log.best_epoch - 1]
    assert best == min(log.val_loss)
    recomputed = batch_loss(params, np.stack([c.image for c in val]), np.stack([c.lesion_mask for c in val]))
    assert recomputed == pytest.approx(best, rel=1e-9)


@pytest.mark.slow
def test_segmenter_learns_clean_phantoms(labeled_cohort):
    train, val, test = _prepared(labeled_cohort)
    cfg = TrainConfig(max_epochs=30, batch_size=4, lr=1e-3, seed=7, augment=AugmentConfig(enabled=False))
    params, log = fit(train, val, cfg)
    preds = predict_masks(params, [c.image for c in test])
    dice = np.mean([dice_score(p, c.lesion_mask) for p, c in zip(preds, test)])
    assert dice >= 0.8, log

import numpy as np
import pytest

from motionbias.errors import ValidationError
from motionbias.rng import MAX_SEED, Stream, make_rng


def test_same_keys_same_stream():
    a = make_rng(7, Stream.CORRUPTION, 3).random(5)
    b = make_rng(7, Stream.CORRUPTION, 3).random(5)
    np.testing.assert_array_equal(a, b)


def test_keys_separate_streams():
    draws = {
        (seed, stream, index): make_rng(seed, stream, index).integers(0, 2**62)
        for seed in (0, 7)
        for stream in Stream
        for index in (0, 1)
    }
    assert len(set(draws.values())) == len(draws)


def test_seed_bounds():
    make_rng(0)
    make_rng(MAX_SEED)
    with pytest.raises(ValidationError):
        make_rng(-1)
    with pytest.raises(ValidationError):
        make_rng(MAX_SEED + 1)

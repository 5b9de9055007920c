"""Deterministic random streams.

Every random decision draws from a generator derived from the experiment seed
plus a purpose key and, where relevant, a case or epoch index. Streams never
share state, so adding a case or an epoch does not shift any other draw.
"""
from enum import IntEnum

import numpy as np

from motionbias.errors import ValidationError


class Stream(IntEnum):
    COHORT = 0
    CATEGORIES = 1
    SPLITS = 2
    CORRUPTION = 3
    INIT = 4
    ORDER = 5
    AUGMENT = 6


MAX_SEED = 2**64 - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator seeded from (seed, *keys)."""
    if not 0 <= seed <= MAX_SEED:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    entropy = [int(seed), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

"""
Training-set orderings: uniformly shuffled, or grouped by increasing motion
severity (minimal, mild, moderate, severe) with a fresh shuffle inside each
group every epoch.
"""
from enum import Enum
from typing import List, Sequence

import numpy as np

from motionbias.errors import ValidationError
from motionbias.tensors import CaseRecord, SeverityCategory


class OrderingStrategy(str, Enum):
    SHUFFLED = "shuffled"
    CURRICULUM = "curriculum"


def _check_severity(cases: Sequence[CaseRecord]) -> None:
    unlabeled = [c.case_id for c in cases if c.severity is None]
    if unlabeled:
        raise ValidationError(f"cases without severity cannot be ordered: {unlabeled[:3]}")


def order_epoch(cases: Sequence[CaseRecord], strategy: OrderingStrategy, epoch: int,
                rng: np.random.Generator, staged: bool = False) -> List[CaseRecord]:
    """Presentation order of the training cases for one epoch.

    Both strategies return a permutation of ``cases``. With ``staged`` the
    curriculum admits one more non-empty category per epoch (epoch 0 sees the
    least severe one present), so early epochs are a subset.
    """
    _check_severity(cases)
    strategy = OrderingStrategy(strategy)
    if strategy == OrderingStrategy.SHUFFLED:
        return [cases[i] for i in rng.permutation(len(cases))]

    groups = [[c for c in cases if c.severity == category] for category in SeverityCategory]
    if staged:
        # empty categories do not take up a stage
        groups = [g for g in groups if g][:epoch + 1]
    ordered: List[CaseRecord] = []
    for group in groups:
        ordered.extend(group[i] for i in rng.permutation(len(group)))
    return ordered

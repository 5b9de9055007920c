"""
Dice evaluation and the statistical tests used to compare training arms.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import special, stats

from motionbias.errors import ShapeError, ValidationError
from motionbias.tensors import as_mask

ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 20


class DiceResult(BaseModel):
    case_id: str
    dice: float = Field(ge=0.0, le=1.0)


class StatTestResult(BaseModel):
    test_name: str
    statistic: float
    p_value: float = Field(ge=0.0, le=1.0)
    n: int = Field(ge=0)
    alpha: float = ALPHA
    normality_p_value: Optional[float] = None  # set when chosen by choose_paired_test

    @field_validator("p_value", mode="before")
    @classmethod
    def _clip(cls, v):
        return min(1.0, max(0.0, float(v)))

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha

    def as_row(self) -> Tuple[str, float, float, int]:
        return self.test_name, self.statistic, self.p_value, self.n


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_score(pred, truth) -> float:
    """2|P and T| / (|P| + |T|); two empty masks score 1.0."""
    p = as_mask(pred).astype(bool)
    t = as_mask(truth).astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation; a single value has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot summarize an empty list")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------

def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for 0 <= x <= 1 and a, b > 0."""
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise ValidationError(f"incomplete beta needs 0 <= x <= 1, got {x}")
    if not (a > 0 and b > 0):
        raise ValidationError(f"incomplete beta needs a, b > 0, got a={a}, b={b}")
    return float(special.betainc(a, b, x))


def _student_t_two_sided(t: float, dof: float) -> float:
    return regularized_incomplete_beta(dof / (dof + t * t), dof / 2.0, 0.5)


def _f_upper_tail(f: float, d1: float, d2: float) -> float:
    return regularized_incomplete_beta(d2 / (d2 + d1 * f), d2 / 2.0, d1 / 2.0)


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------

def _paired(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValidationError(f"paired samples must be equal-length lists, got {a.shape} and {b.shape}")
    return a - b


def shapiro_wilk(sample: Sequence[float]) -> StatTestResult:
    """Shapiro-Wilk normality test (Royston's AS R94 approximation)."""
    x = np.asarray(sample, dtype=np.float64)
    if not 3 <= x.size <= 5000:
        raise ValidationError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={x.size}")
    if np.ptp(x) == 0:
        raise ValidationError("Shapiro-Wilk is undefined for a constant sample")
    w, p = stats.shapiro(x)
    return StatTestResult(test_name="shapiro_wilk", statistic=float(w), p_value=float(p), n=x.size)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> StatTestResult:
    d = _paired(a, b)
    n = d.size
    if n < 2:
        raise ValidationError(f"paired t-test needs n >= 2, got {n}")
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValidationError("paired t-test is undefined when the differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return StatTestResult(test_name="paired_t", statistic=float(t),
                          p_value=_student_t_two_sided(float(t), n - 1), n=n)


def _exact_signed_rank_cdf(doubled_ranks: np.ndarray, doubled_w: int) -> int:
    """Number of sign patterns whose positive rank sum is <= W (all in doubled units)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return int(counts[:doubled_w + 1].sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], method: str = "auto") -> StatTestResult:
    """Two-sided Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes get average ranks. The
    statistic is min(W+, W-). ``method`` is ``exact`` (enumeration over all
    sign patterns), ``approx`` (normal with tie and continuity correction) or
    ``auto`` (exact up to 20 non-zero pairs).
    """
    if method not in ("auto", "exact", "approx"):
        raise ValidationError(f"unknown Wilcoxon method {method!r}")
    d = _paired(a, b)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValidationError("Wilcoxon test needs at least one non-zero difference")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        below = _exact_signed_rank_cdf(doubled, int(round(2.0 * w)))
        p = min(1.0, 2.0 * below / 2.0 ** n)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
        z = min(0.0, (w - mean + 0.5) / math.sqrt(var))
        p = min(1.0, 2.0 * float(stats.norm.cdf(z)))
    return StatTestResult(test_name="wilcoxon", statistic=w, p_value=p, n=n)


def anova_oneway(groups: Sequence[Sequence[float]]) -> StatTestResult:
    """One-way ANOVA F test across ``groups``."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValidationError(f"ANOVA needs at least 2 groups, got {len(arrays)}")
    if any(a.size < 2 for a in arrays):
        raise ValidationError("ANOVA needs at least 2 observations per group")
    pooled = np.concatenate(arrays)
    grand = pooled.mean()
    ss_between = float(sum(a.size * (a.mean() - grand) ** 2 for a in arrays))
    ss_within = float(sum(np.sum((a - a.mean()) ** 2) for a in arrays))
    if ss_within == 0:
        raise ValidationError("ANOVA is undefined when every group has zero variance")
    d1 = len(arrays) - 1
    d2 = pooled.size - len(arrays)
    f = (ss_between / d1) / (ss_within / d2)
    return StatTestResult(test_name="anova", statistic=f, p_value=_f_upper_tail(f, d1, d2), n=pooled.size)


def choose_paired_test(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> StatTestResult:
    """Paired t-test when the differences look normal, Wilcoxon otherwise.

    Fewer than three pairs cannot be tested for normality and go straight to
    Wilcoxon.
    """
    d = _paired(a, b)
    if d.size < 3:
        result = wilcoxon_signed_rank(a, b)
        return result.model_copy(update={"alpha": alpha})
    normality = shapiro_wilk(d)
    if normality.p_value >= alpha:
        result = paired_t_test(a, b)
    else:
        result = wilcoxon_signed_rank(a, b)
    return result.model_copy(update={"alpha": alpha, "normality_p_value": normality.p_value})


def dice_results(case_ids: Sequence[str], preds: Sequence[np.ndarray],
                 truths: Sequence[np.ndarray]) -> List[DiceResult]:
    return [DiceResult(case_id=c, dice=dice_score(p, t)) for c, p, t in zip(case_ids, preds, truths)]

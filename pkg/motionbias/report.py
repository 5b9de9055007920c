"""
Cross-arm report: dice summary per arm, pairwise arm comparisons, and
per-category shuffled-vs-curriculum tests, written as JSON, CSV and SVG.
"""
import csv
import io
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from motionbias.errors import MotionBiasError, ValidationError
from motionbias.experiment import ArmRun, ExperimentArm, load_arm_run
from motionbias.logger import logger
from motionbias.segmenter import TrainLog
from motionbias.stats import StatTestResult, anova_oneway, choose_paired_test, wilcoxon_signed_rank
from motionbias.tensors import SeverityCategory

A = ExperimentArm

PAIRWISE_COMPARISONS: List[Tuple[ExperimentArm, ExperimentArm]] = [
    (A.SHUFFLED_NO_SKULL_CLEAN, A.SHUFFLED_SKULL_CLEAN),
    (A.SHUFFLED_SKULL_CLEAN, A.SHUFFLED_SKULL_MOTION),
    (A.SHUFFLED_SKULL_MOTION, A.CURRICULUM_SKULL_MOTION),
    (A.SHUFFLED_SKULL_CLEAN, A.CURRICULUM_SKULL_MOTION),
]

STRATEGY_PAIR = (A.SHUFFLED_SKULL_MOTION, A.CURRICULUM_SKULL_MOTION)
# clean-trained network scored on the motion test set, drawn next to each pair
REFERENCE_ARM = A.SHUFFLED_SKULL_CLEAN_ON_MOTION


class ArmSummary(BaseModel):
    arm: ExperimentArm
    mean: float
    std: float
    n: int


class ArmComparison(BaseModel):
    label: str
    arm_a: ExperimentArm
    arm_b: ExperimentArm
    result: StatTestResult


class CategoryComparison(BaseModel):
    category: SeverityCategory
    shuffled_mean: float
    curriculum_mean: float
    result: StatTestResult


class RunReport(BaseModel):
    arms: List[ArmSummary]
    pairwise: List[ArmComparison]
    overall: StatTestResult
    categories: List[CategoryComparison]
    train_logs: Dict[ExperimentArm, TrainLog]


def load_runs(runs_dir) -> Dict[ExperimentArm, ArmRun]:
    """All five arm results under ``runs_dir``; a missing arm is an error."""
    runs_dir = Path(runs_dir)
    runs = {}
    for arm in ExperimentArm:
        if not (runs_dir / arm.value / "result.json").is_file():
            raise ValidationError(f"run for arm {arm.value} missing under {runs_dir}")
        runs[arm] = load_arm_run(runs_dir / arm.value)
    return runs


def _no_difference(n: int, test_name: str = "no_difference") -> StatTestResult:
    return StatTestResult(test_name=test_name, statistic=0.0, p_value=1.0, n=n)


def _paired_test(a: Sequence[float], b: Sequence[float], label: str = "paired") -> StatTestResult:
    """choose_paired_test, falling back to Wilcoxon; every fallback is logged and named in test_name."""
    if np.array_equal(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)):
        return _no_difference(len(a))
    try:
        return choose_paired_test(a, b)
    except MotionBiasError as e:
        logger.warning(f"{label}: paired test failed ({e}); falling back to Wilcoxon")
    try:
        result = wilcoxon_signed_rank(a, b)
        return result.model_copy(update={"test_name": "wilcoxon (fallback)"})
    except MotionBiasError as e:
        logger.warning(f"{label}: Wilcoxon failed ({e}); reporting no difference")
        return _no_difference(len(a), "no_difference (fallback)")


def _anova_or_none(groups: Sequence[Sequence[float]], label: str = "anova") -> StatTestResult:
    """One-way ANOVA; constant groups are decided by their means alone."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    n = sum(g.size for g in arrays)
    if len(arrays) >= 2 and all(g.size >= 2 and np.ptp(g) == 0 for g in arrays):
        if len({float(g[0]) for g in arrays}) == 1:
            return _no_difference(n)
        logger.warning(f"{label}: every group is constant but the means differ; reporting p = 0")
        return StatTestResult(test_name="anova (zero variance)", statistic=float("inf"), p_value=0.0, n=n)
    try:
        return anova_oneway(arrays)
    except ValidationError as e:
        logger.warning(f"{label}: ANOVA failed ({e}); reporting no difference")
        return _no_difference(n, "no_difference (fallback)")


def build_report(runs: Dict[ExperimentArm, ArmRun]) -> RunReport:
    missing = [arm.value for arm in ExperimentArm if arm not in runs]
    if missing:
        raise ValidationError(f"report needs all five arms; missing {', '.join(missing)}")

    arms = []
    for arm in ExperimentArm:
        mean, std = runs[arm].mean_std
        arms.append(ArmSummary(arm=arm, mean=mean, std=std, n=len(runs[arm].dice)))

    def dice_values(arm: ExperimentArm) -> List[float]:
        return [d.dice for d in runs[arm].dice]

    pairwise = [
        ArmComparison(label=f"{a.design.label} vs. {b.design.label}", arm_a=a, arm_b=b,
                      result=_anova_or_none([dice_values(a), dice_values(b)],
                                            f"{a.design.label} vs. {b.design.label}"))
        for a, b in PAIRWISE_COMPARISONS
    ]
    overall = _anova_or_none([dice_values(arm) for arm in ExperimentArm], "all arms")

    shuffled, curriculum = (runs[arm].dice_by_case() for arm in STRATEGY_PAIR)
    if set(shuffled) != set(curriculum):
        raise ValidationError(
            f"{STRATEGY_PAIR[0].value} and {STRATEGY_PAIR[1].value} were scored on different test cases"
        )
    categories = []
    for category in SeverityCategory:
        ids = sorted(cid for cid, d in shuffled.items() if d.severity == category)
        if not ids:
            raise ValidationError(f"no {category.value} cases in the test set")
        a = [shuffled[cid].dice for cid in ids]
        b = [curriculum[cid].dice for cid in ids]
        categories.append(CategoryComparison(
            category=category,
            shuffled_mean=float(np.mean(a)),
            curriculum_mean=float(np.mean(b)),
            result=_paired_test(a, b, f"{category.value} shuffled vs. curriculum"),
        ))

    return RunReport(arms=arms, pairwise=pairwise, overall=overall, categories=categories,
                     train_logs={arm: runs[arm].train_log for arm in ExperimentArm})


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def arms_csv(report: RunReport) -> str:
    return _csv(["arm", "mean", "std", "n"],
                [[s.arm.value, f"{s.mean:.6f}", f"{s.std:.6f}", s.n] for s in report.arms])


def pairwise_csv(report: RunReport) -> str:
    rows = [[c.label, c.result.test_name, f"{c.result.statistic:.6f}", f"{c.result.p_value:.6g}", c.result.n]
            for c in report.pairwise]
    o = report.overall
    rows.append(["all arms", o.test_name, f"{o.statistic:.6f}", f"{o.p_value:.6g}", o.n])
    return _csv(["comparison", "test_name", "statistic", "p", "n"], rows)


def categories_csv(report: RunReport) -> str:
    rows = [[c.category.value, f"{c.shuffled_mean:.6f}", f"{c.curriculum_mean:.6f}", c.result.test_name,
             f"{c.result.statistic:.6f}", f"{c.result.p_value:.6g}", c.result.n]
            for c in report.categories]
    return _csv(["category", "shuffled_mean", "curriculum_mean", "test_name", "statistic", "p", "n"], rows)


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

SVG_WIDTH = 640
SVG_HEIGHT = 360
MARGIN = 48
PALETTE = ["#1f77b4", "#d4a017", "#2ca02c", "#ff7f0e", "#e377c2", "#8c564b", "#7f7f7f", "#17becf"]


def _svg(body: List[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
            f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="11">')
    title_el = f'<text x="{SVG_WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', title_el, *body, "</svg>"]) + "\n"


def _y_axis(lo: float, hi: float, label: str) -> Tuple[List[str], Callable[[float], float]]:
    top, bottom = MARGIN, SVG_HEIGHT - MARGIN
    span = hi - lo if hi > lo else 1.0

    def y(v: float) -> float:
        return bottom - (v - lo) / span * (bottom - top)

    parts = [f'<line x1="{MARGIN}" y1="{top}" x2="{MARGIN}" y2="{bottom}" stroke="black"/>',
             f'<line x1="{MARGIN}" y1="{bottom}" x2="{SVG_WIDTH - MARGIN / 2:.1f}" y2="{bottom}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 5):
        parts.append(f'<line x1="{MARGIN - 4}" y1="{y(tick):.2f}" x2="{MARGIN}" y2="{y(tick):.2f}" stroke="black"/>')
        parts.append(f'<text x="{MARGIN - 6}" y="{y(tick) + 4:.2f}" text-anchor="end">{tick:.2f}</text>')
    parts.append(f'<text x="12" y="{(top + bottom) / 2:.1f}" transform="rotate(-90 12 {(top + bottom) / 2:.1f})" '
                 f'text-anchor="middle">{label}</text>')
    return parts, y


def box_plot_svg(groups: Sequence[Tuple[str, Sequence[float]]], title: str, ylabel: str = "dice") -> str:
    """Box plot with 1.5 IQR whiskers and outlier dots, one box per group."""
    parts, y = _y_axis(0.0, 1.0, ylabel)
    slot = (SVG_WIDTH - 1.5 * MARGIN) / max(len(groups), 1)
    for i, (name, values) in enumerate(groups):
        v = np.asarray(values, dtype=np.float64)
        cx = MARGIN + slot * (i + 0.5)
        half = slot * 0.3
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<text x="{cx:.2f}" y="{SVG_HEIGHT - MARGIN + 16}" text-anchor="middle">{name}</text>')
        if v.size == 0:
            continue
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
        low, high = inside.min(), inside.max()
        parts.append(f'<line x1="{cx:.2f}" y1="{y(low):.2f}" x2="{cx:.2f}" y2="{y(high):.2f}" stroke="black"/>')
        parts.append(f'<rect x="{cx - half:.2f}" y="{y(q3):.2f}" width="{2 * half:.2f}" '
                     f'height="{y(q1) - y(q3):.2f}" fill="{color}" fill-opacity="0.6" stroke="black"/>')
        parts.append(f'<line x1="{cx - half:.2f}" y1="{y(med):.2f}" x2="{cx + half:.2f}" y2="{y(med):.2f}" '
                     f'stroke="black" stroke-width="2"/>')
        for outlier in v[(v < low) | (v > high)]:
            parts.append(f'<circle cx="{cx:.2f}" cy="{y(outlier):.2f}" r="2.5" fill="none" stroke="black"/>')
    return _svg(parts, title)


def loss_curve_svg(log: TrainLog, title: str) -> str:
    """Training (red) and validation (blue) loss per epoch, best epoch marked."""
    series = [log.train_loss, log.val_loss]
    hi = max([max(s) for s in series if s] + [1e-6])
    parts, y = _y_axis(0.0, hi, "soft dice loss")
    epochs = max(len(log.train_loss), 1)
    plot_w = SVG_WIDTH - 1.5 * MARGIN

    def x(epoch: int) -> float:
        return MARGIN + (epoch - 0.5) / epochs * plot_w

    for values, color, name in ((log.train_loss, "#d62728", "train"), (log.val_loss, "#1f77b4", "validation")):
        if not values:
            continue
        points = " ".join(f"{x(e):.2f},{y(v):.2f}" for e, v in enumerate(values, 1))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    if log.best_epoch:
        bx = x(log.best_epoch)
        parts.append(f'<line x1="{bx:.2f}" y1="{MARGIN}" x2="{bx:.2f}" y2="{SVG_HEIGHT - MARGIN}" '
                     f'stroke="#7f7f7f" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{SVG_WIDTH / 2:.1f}" y="{SVG_HEIGHT - MARGIN + 28}" text-anchor="middle">epoch '
                 f'(train red, validation blue, best dashed)</text>')
    return _svg(parts, title)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def write_report(report: RunReport, runs: Dict[ExperimentArm, ArmRun], out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, str] = {
        "report.json": report.model_dump_json(indent=2) + "\n",
        "arms.csv": arms_csv(report),
        "pairwise.csv": pairwise_csv(report),
        "categories.csv": categories_csv(report),
        "box_arms.svg": box_plot_svg(
            [(arm.design.label, [d.dice for d in runs[arm].dice]) for arm in ExperimentArm],
            "Dice per arm"),
    }
    category_groups = []
    for category in SeverityCategory:
        for arm in (REFERENCE_ARM, *STRATEGY_PAIR):
            values = [d.dice for d in runs[arm].dice if d.severity == category]
            category_groups.append((f"{category.value[:3]} {arm.design.label}", values))
    files["box_categories.svg"] = box_plot_svg(category_groups, "Dice per motion category")
    for arm in ExperimentArm:
        files[f"loss_{arm.value}.svg"] = loss_curve_svg(report.train_logs[arm], f"{arm.value} loss")

    written = []
    for name, text in files.items():
        path = out / name
        try:
            path.write_text(text)
        except OSError as e:
            raise OSError(e.errno, f"cannot write report file {path}: {e.strerror}") from e
        written.append(path)
    return written


def log_report(report: RunReport) -> None:
    logger.summary_table("Dice per arm", ["arm", "mean", "std", "n"],
                         [(s.arm.value, f"{s.mean:.3f}", f"{s.std:.3f}", s.n) for s in report.arms])
    logger.summary_table("Arm comparisons", ["comparison", "test", "F", "p"],
                         [(c.label, c.result.test_name, f"{c.result.statistic:.3f}", f"{c.result.p_value:.4f}")
                          for c in report.pairwise]
                         + [("all arms", report.overall.test_name, f"{report.overall.statistic:.3f}",
                             f"{report.overall.p_value:.4f}")])
    logger.summary_table("Shuffled vs curriculum per category", ["category", "shuffled", "curriculum", "test", "p"],
                         [(c.category.value, f"{c.shuffled_mean:.3f}", f"{c.curriculum_mean:.3f}",
                           c.result.test_name, f"{c.result.p_value:.4f}") for c in report.categories])


def generate_report(runs_dir, out_dir: Optional[str] = None) -> RunReport:
    runs = load_runs(runs_dir)
    report = build_report(runs)
    write_report(report, runs, out_dir or runs_dir)
    log_report(report)
    return report

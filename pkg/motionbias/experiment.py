"""
Cohort pipeline and experiment arms.

Every step reads and writes a manifest directory:

    <dir>/manifest.json
    <dir>/images/<case>.mrt        clean slice
    <dir>/masks/<case>_brain.mrt
    <dir>/masks/<case>_lesion.mrt
    <dir>/skull/<case>.mrt         clean slice plus skull   (corrupt step)
    <dir>/motion/<case>.mrt        skull slice with motion  (corrupt step)

A run directory holds one sub-directory per arm with result.json, dice.csv,
trainlog.json, config.json and checkpoint/.
"""
import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pydantic
from pydantic import BaseModel

from motionbias.config import Config, get_config
from motionbias.curriculum import OrderingStrategy
from motionbias.dataset import assign_all_splits, assign_categories, preprocess_case
from motionbias.errors import ValidationError
from motionbias.logger import logger
from motionbias.motion import add_skull, corrupt_image_events, sample_trajectories
from motionbias.phantom import generate_cohort
from motionbias.rng import Stream, make_rng
from motionbias.segmenter import TrainLog, fit, predict_masks, save_checkpoint
from motionbias.stats import dice_score, summarize
from motionbias.tensors import (
    CaseRecord,
    Manifest,
    ManifestCase,
    SeverityCategory,
    Split,
    as_mask,
    load_case,
    load_manifest,
    save_manifest,
    write_tensor,
)

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# Arms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmDesign:
    train_variant: str
    test_variant: str
    strategy: OrderingStrategy
    label: str  # short form used in comparison tables


class ExperimentArm(str, Enum):
    SHUFFLED_NO_SKULL_CLEAN = "ShuffledNoSkullClean"
    SHUFFLED_SKULL_CLEAN = "ShuffledSkullClean"
    SHUFFLED_SKULL_CLEAN_ON_MOTION = "ShuffledSkullCleanOnMotion"
    SHUFFLED_SKULL_MOTION = "ShuffledSkullMotion"
    CURRICULUM_SKULL_MOTION = "CurriculumSkullMotion"

    @property
    def design(self) -> ArmDesign:
        return _ARM_DESIGNS[self]


_ARM_DESIGNS: Dict[ExperimentArm, ArmDesign] = {
    ExperimentArm.SHUFFLED_NO_SKULL_CLEAN: ArmDesign("clean", "clean", OrderingStrategy.SHUFFLED, "s_nSC"),
    ExperimentArm.SHUFFLED_SKULL_CLEAN: ArmDesign("skull", "skull", OrderingStrategy.SHUFFLED, "s_SC"),
    ExperimentArm.SHUFFLED_SKULL_CLEAN_ON_MOTION: ArmDesign("skull", "motion", OrderingStrategy.SHUFFLED, "s_SCoM"),
    ExperimentArm.SHUFFLED_SKULL_MOTION: ArmDesign("motion", "motion", OrderingStrategy.SHUFFLED, "s_SM"),
    ExperimentArm.CURRICULUM_SKULL_MOTION: ArmDesign("motion", "motion", OrderingStrategy.CURRICULUM, "c_SM"),
}


class CaseDice(BaseModel):
    case_id: str
    severity: SeverityCategory
    dice: float


class ArmRun(BaseModel):
    arm: ExperimentArm
    seed: int
    lr: float
    dice: List[CaseDice]
    train_log: TrainLog

    @property
    def mean_std(self) -> Tuple[float, float]:
        return summarize([d.dice for d in self.dice])

    def dice_by_case(self) -> Dict[str, CaseDice]:
        return {d.case_id: d for d in self.dice}


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------

def _relative_paths(case_id: str) -> Dict[str, str]:
    return {
        "image": f"images/{case_id}.mrt",
        "brain_mask": f"masks/{case_id}_brain.mrt",
        "lesion_mask": f"masks/{case_id}_lesion.mrt",
    }


def _make_dirs(root: Path, *names: str) -> None:
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)


def write_case_files(root: Path, case: CaseRecord) -> ManifestCase:
    paths = _relative_paths(case.case_id)
    write_tensor(root / paths["image"], case.image.astype(np.float32))
    write_tensor(root / paths["brain_mask"], case.brain_mask)
    write_tensor(root / paths["lesion_mask"], case.lesion_mask)
    return ManifestCase(case_id=case.case_id, severity=case.severity, split=case.split, **paths)


def write_cohort(out_dir, count: int, seed: int, cfg: Optional[Config] = None) -> Manifest:
    """Generate ``count`` phantoms and write them with a fresh manifest."""
    cfg = cfg or get_config()
    root = Path(out_dir)
    _make_dirs(root, "images", "masks")
    cases = generate_cohort(count, cfg.phantom, seed)
    entries = []
    for i, case in enumerate(cases, 1):
        entries.append(write_case_files(root, case))
        logger.progress("phantoms", i, len(cases))
    manifest = Manifest(seed=seed, cases=entries)
    save_manifest(manifest, root / MANIFEST_NAME)
    return manifest


def load_cohort(manifest_path, variant: str = "clean") -> Tuple[Manifest, List[CaseRecord]]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    cases = [load_case(entry, manifest_path.parent, variant) for entry in manifest.cases]
    return manifest, cases


def split_cohort(manifest_path, seed: int, cfg: Optional[Config] = None) -> Manifest:
    """Assign severity categories and train/val/test splits in place."""
    cfg = cfg or get_config()
    manifest, cases = load_cohort(manifest_path)
    cases = assign_categories(cases, make_rng(seed, Stream.CATEGORIES))
    cases = assign_all_splits(cases, make_rng(seed, Stream.SPLITS), cfg.split)
    labels = {c.case_id: (c.severity, c.split) for c in cases}
    updated = [
        entry.model_copy(update={"severity": labels[entry.case_id][0], "split": labels[entry.case_id][1]})
        for entry in manifest.cases
    ]
    manifest = manifest.model_copy(update={"cases": updated})
    save_manifest(manifest, manifest_path)
    return manifest


def _corrupt_one(root: Path, entry: ManifestCase, index: int, seed: int, cfg: Config) -> ManifestCase:
    if entry.severity is None:
        raise ValidationError(f"case {entry.case_id} has no severity; run the split step first")
    case = load_case(entry, root, "clean")
    skull = add_skull(case.image, case.brain_mask, cfg.skull)
    rng = make_rng(seed, Stream.CORRUPTION, index)
    events = sample_trajectories(entry.severity, skull.shape[0], rng, cfg.motion)
    moved = corrupt_image_events(skull, events, cfg.motion.profile_order)
    skull_rel = f"skull/{entry.case_id}.mrt"
    motion_rel = f"motion/{entry.case_id}.mrt"
    write_tensor(root / skull_rel, skull.astype(np.float32))
    write_tensor(root / motion_rel, moved.astype(np.float32))
    return entry.model_copy(update={
        "skull_image": skull_rel,
        "motion_image": motion_rel,
        "motion_events": [e.as_dict() for e in events if not e.is_identity],
    })


def corrupt_cohort(manifest_path, seed: int, cfg: Optional[Config] = None,
                   threads: Optional[int] = None) -> Manifest:
    """Add a skull to every case and simulate motion at each case's severity."""
    cfg = cfg or get_config()
    threads = threads or cfg.runtime.threads
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = load_manifest(manifest_path)
    missing = [e.case_id for e in manifest.cases if e.severity is None]
    if missing:
        raise ValidationError(f"cases without severity cannot be corrupted: {missing[:3]}; run split first")
    _make_dirs(root, "skull", "motion")

    jobs = list(enumerate(manifest.cases))
    if threads <= 1:
        updated = [_corrupt_one(root, entry, i, seed, cfg) for i, entry in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updated = list(pool.map(lambda job: _corrupt_one(root, job[1], job[0], seed, cfg), jobs))
    manifest = manifest.model_copy(update={"cases": updated})
    save_manifest(manifest, manifest_path)
    return manifest


def parse_labels(text: str) -> List[int]:
    try:
        labels = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError as e:
        raise ValidationError(f"labels must be comma-separated integers, got {text!r}") from e
    if not labels:
        raise ValidationError("at least one foreground label is required")
    return labels


def import_slice(manifest_path, case_id: str, image_path, label_path, labels: Sequence[int] = (1, 4),
                 brain_path=None) -> Manifest:
    """Add an external slice (.npy arrays) to a manifest, creating it if needed.

    The label map is collapsed to a binary mask of ``labels``. Without a brain
    mask the brain is taken as every non-zero pixel of the (skull-stripped)
    image.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    _make_dirs(root, "images", "masks")
    manifest = load_manifest(manifest_path) if manifest_path.exists() else Manifest()
    if any(c.case_id == case_id for c in manifest.cases):
        raise ValidationError(f"case {case_id!r} already in {manifest_path}")

    image = _load_npy(image_path)
    label_map = _load_npy(label_path)
    lesion = np.isin(label_map, list(labels)).astype(np.uint8)
    brain = as_mask(_load_npy(brain_path)) if brain_path else (image > 0).astype(np.uint8)
    # labels may extend past a thresholded brain by a pixel; the brain must contain the lesion
    brain = np.maximum(brain, lesion)
    case = CaseRecord(case_id=case_id, image=image, brain_mask=brain, lesion_mask=lesion)
    manifest = manifest.model_copy(update={"cases": [*manifest.cases, write_case_files(root, case)]})
    save_manifest(manifest, manifest_path)
    return manifest


def _load_npy(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except OSError as e:
        raise OSError(e.errno, f"cannot read array {path}: {e.strerror}") from e
    except ValueError as e:
        raise ValidationError(f"{path}: not a numpy array file ({e})") from e


# ---------------------------------------------------------------------------
# Arms
# ---------------------------------------------------------------------------

def _arm_cases(manifest: Manifest, root: Path, arm: ExperimentArm, split: Split,
               variant: str, pad_target: Optional[int]) -> List[CaseRecord]:
    entries = [e for e in manifest.cases if e.split == split]
    if not entries:
        raise ValidationError(f"arm {arm.value}: no {split.value} cases; run the split step first")
    cases = []
    for entry in entries:
        try:
            case = load_case(entry, root, variant)
        except ValidationError as e:
            raise ValidationError(f"arm {arm.value}: {e}") from e
        cases.append(preprocess_case(case, pad_target))
    return cases


def run_arm(manifest_path, arm: ExperimentArm, out_dir, seed: int, lr: Optional[float] = None,
            cfg: Optional[Config] = None, threads: Optional[int] = None) -> ArmRun:
    """Train one arm from scratch and score it on the arm's test images."""
    cfg = cfg or get_config()
    arm = ExperimentArm(arm)
    design = arm.design
    threads = threads or cfg.runtime.threads
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    pad = cfg.preprocess.pad_target

    train = _arm_cases(manifest, root, arm, Split.TRAIN, design.train_variant, pad)
    val = _arm_cases(manifest, root, arm, Split.VAL, design.train_variant, pad)
    test = _arm_cases(manifest, root, arm, Split.TEST, design.test_variant, pad)

    train_cfg = cfg.train.model_copy(update={
        "seed": seed,
        "lr": lr if lr is not None else cfg.train.lr,
        "strategy": design.strategy,
        "threads": threads,
    })
    logger.banner(f"ARM {arm.value}", {
        "train/val/test": f"{len(train)}/{len(val)}/{len(test)}",
        "data": f"{design.train_variant} -> {design.test_variant}",
        "strategy": design.strategy.value,
        "seed": seed,
        "lr": train_cfg.lr,
    })
    params, log = fit(train, val, train_cfg)

    preds = predict_masks(params, [c.image for c in test], threads)
    dice = [CaseDice(case_id=c.case_id, severity=c.severity, dice=dice_score(p, c.lesion_mask))
            for c, p in zip(test, preds)]
    result = ArmRun(arm=arm, seed=seed, lr=train_cfg.lr, dice=dice, train_log=log)
    mean, std = result.mean_std
    logger.arm_result(arm.value, mean, std, len(dice))

    write_arm_run(Path(out_dir) / arm.value, result, params, cfg, train_cfg)
    return result


def dice_csv(result: ArmRun) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "severity", "dice"])
    for row in result.dice:
        writer.writerow([row.case_id, row.severity.value, repr(row.dice)])
    return buf.getvalue()


def write_arm_run(arm_dir: Path, result: ArmRun, params, cfg: Config, train_cfg) -> None:
    arm_dir.mkdir(parents=True, exist_ok=True)
    try:
        (arm_dir / "result.json").write_text(result.model_dump_json(indent=2) + "\n")
        (arm_dir / "dice.csv").write_text(dice_csv(result))
        (arm_dir / "trainlog.json").write_text(result.train_log.model_dump_json(indent=2) + "\n")
        effective = cfg.model_copy(update={"train": train_cfg}).model_dump(mode="json")
        effective["arm"] = result.arm.value
        (arm_dir / "config.json").write_text(json.dumps(effective, indent=2) + "\n")
    except OSError as e:
        raise OSError(e.errno, f"cannot write run {arm_dir}: {e.strerror}") from e
    save_checkpoint(arm_dir / "checkpoint", params, extra={"arm": result.arm.value, "seed": result.seed})


def load_arm_run(arm_dir) -> ArmRun:
    path = Path(arm_dir) / "result.json"
    try:
        return ArmRun.model_validate_json(path.read_text())
    except OSError as e:
        raise OSError(e.errno, f"cannot read run {path}: {e.strerror}") from e
    except pydantic.ValidationError as e:
        raise ValidationError(f"{path}: invalid run result: {e}") from e

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import pydantic
import yaml

from motionbias.config import Config, RuntimeConfig, get_config, load_config, set_config
from motionbias.errors import MotionBiasError
from motionbias.experiment import (
    MANIFEST_NAME,
    ExperimentArm,
    corrupt_cohort,
    import_slice,
    parse_labels,
    run_arm,
    split_cohort,
    write_cohort,
)
from motionbias.logger import logger
from motionbias.phantom import PhantomConfig
from motionbias.report import generate_report

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

DEFAULT_SEED = 7
DEFAULT_COHORT = 64


def cmd_phantom(args, config: Config) -> None:
    size = args.size if args.size is not None else config.phantom.size
    phantom = PhantomConfig(**{**config.phantom.model_dump(), "size": size})
    config = config.model_copy(update={"phantom": phantom})
    logger.banner("PHANTOM COHORT", {"count": args.count, "size": size, "seed": args.seed, "out": args.out})
    if size % 4:
        logger.warning(f"size {size} is not divisible by 4; the segmenter needs divisible-by-4 slices "
                       "(set preprocess.pad_target)")
    manifest = write_cohort(args.out, args.count, args.seed, config)
    logger.step(f"✅ Wrote {len(manifest.cases)} cases to {Path(args.out) / MANIFEST_NAME}")


def cmd_split(args, config: Config) -> None:
    logger.banner("SPLIT", {"manifest": args.manifest, "seed": args.seed})
    manifest = split_cohort(args.manifest, args.seed, config)
    counts = {}
    for case in manifest.cases:
        key = (case.severity.value, case.split.value)
        counts[key] = counts.get(key, 0) + 1
    rows = [(sev, counts.get((sev, "train"), 0), counts.get((sev, "val"), 0), counts.get((sev, "test"), 0))
            for sev in ("minimal", "mild", "moderate", "severe")]
    logger.summary_table("Cases per category", ["category", "train", "val", "test"], rows)


def cmd_corrupt(args, config: Config) -> None:
    logger.banner("CORRUPT", {"manifest": args.manifest, "seed": args.seed,
                              "events": config.motion.events, "profile order": config.motion.profile_order})
    manifest = corrupt_cohort(args.manifest, args.seed, config, args.threads)
    moved = sum(1 for c in manifest.cases if c.motion_events)
    logger.step(f"✅ Added skull to {len(manifest.cases)} cases, motion to {moved}")


def cmd_run(args, config: Config) -> None:
    arms = list(ExperimentArm) if args.arm == "all" else [ExperimentArm(args.arm)]
    for arm in arms:
        run_arm(args.manifest, arm, args.out, args.seed, args.lr, config, args.threads)
    logger.step(f"✅ Runs written to {args.out}")


def cmd_report(args, config: Config) -> None:
    logger.banner("REPORT", {"runs": args.runs, "out": args.out or args.runs})
    generate_report(args.runs, args.out)


def cmd_import(args, config: Config) -> None:
    labels = parse_labels(args.labels)
    manifest = import_slice(args.manifest, args.case_id, args.image, args.label_map, labels, args.brain_mask)
    logger.step(f"✅ Imported {args.case_id} ({len(manifest.cases)} cases in {args.manifest})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionbias",
                                     description="Motion-artifact bias experiments on synthetic brain slices")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="experiment seed (64-bit)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for corruption and evaluation")
    parser.add_argument("--config", default=None, help="YAML or JSON configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort")
    p.add_argument("--count", type=int, default=DEFAULT_COHORT)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", help="assign motion categories and train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("corrupt", help="add skull and simulate motion")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_corrupt)

    arm_names = [arm.value for arm in ExperimentArm]
    for name, helptext, arm_choices, arm_default in (
        ("run", "train and evaluate experiment arms", arm_names + ["all"], "all"),
        ("train", "train and evaluate a single arm", arm_names, None),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--arm", choices=arm_choices, default=arm_default, required=arm_default is None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare all five arms")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("import", help="add an external slice (.npy) to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--case-id", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--label-map", required=True)
    p.add_argument("--labels", default="1,4", help="label values forming the lesion (default tumor core 1,4)")
    p.add_argument("--brain-mask", default=None)
    p.set_defaults(func=cmd_import)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else Config()
        if args.threads is not None:
            config = config.model_copy(update={"runtime": RuntimeConfig(threads=args.threads)})
        set_config(config)
        logger.configure(config.debug)
        args.func(args, get_config())
        return EXIT_OK
    except (MotionBiasError, pydantic.ValidationError, yaml.YAMLError) as e:
        logger.error(str(e), args.command)
        return EXIT_VALIDATION
    except OSError as e:
        logger.error(str(e), args.command)
        return EXIT_IO
    finally:
        logger.error_summary()


if __name__ == "__main__":
    sys.exit(main())

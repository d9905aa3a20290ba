"""Command-line front end: ``jacfuse <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, resolve_seed
from .errors import JacfuseError

log = logging.getLogger("jacfuse")

STAGE_COMMANDS = ("preprocess", "register", "jacobian", "train", "evaluate")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jacfuse", description="Jacobian-map fusion pipeline for dementia staging on MRI/CT.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory; every stage path is relative to it")
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, help="global seed (fallback: config, then JACFUSE_SEED)")
    common.add_argument("--force", action="store_true", help="rerun even if outputs exist")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes for per-subject work and tree training")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate the synthetic MRI/CT dataset")
    ph.add_argument("--n-per-class", type=int)
    ph.add_argument("--missing", type=float, help="fraction of subjects missing one modality")

    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "train":
            sp.add_argument("--folds", type=int, help="cross-validation folds (overrides config)")

    ra = sub.add_parser("run-all", parents=[common], help="phantom through evaluate in one go")
    ra.add_argument("--n-per-class", type=int)
    ra.add_argument("--missing", type=float)
    ra.add_argument("--folds", type=int)
    return p


def make_config(args, parser: argparse.ArgumentParser):
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        parser.error(str(e))
    changes = {"seed": resolve_seed(args.seed, cfg.seed if args.config else None)}
    if args.out:
        changes["out_dir"] = args.out
    ds = {}
    if getattr(args, "n_per_class", None) is not None:
        if args.n_per_class < 2:
            parser.error("--n-per-class must be at least 2")
        ds["n_per_class"] = args.n_per_class
    if getattr(args, "missing", None) is not None:
        if not 0 <= args.missing < 1:
            parser.error("--missing must lie in [0, 1)")
        ds["missing_fraction"] = args.missing
    if getattr(args, "folds", None) is not None:
        if args.folds < 1:
            parser.error("--folds must be positive")
        ds["folds"] = args.folds
    if ds:
        changes["dataset"] = dataclasses.replace(cfg.dataset, **ds)
    return cfg.replace(**changes)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = make_config(args, parser)
    level = logging.WARNING - 10 * (cfg.verbosity + args.verbose - 1)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")

    from .pipeline import STAGES, run_stage

    try:
        if args.command == "run-all":
            for stage in STAGES:
                run_stage(stage, cfg, force=args.force, jobs=args.jobs)
            table = Path(cfg.out_dir) / "reports" / "table.txt"
            print(table.read_text(), end="")
        else:
            stage = args.command
            ran = run_stage(stage, cfg, force=args.force, jobs=args.jobs)
            print(json.dumps({"stage": stage, "ran": ran, "out": cfg.out_dir}))
            if stage == "evaluate" and ran:
                print((Path(cfg.out_dir) / "reports" / "table.txt").read_text(), end="")
    except (JacfuseError, OSError, ValueError) as e:
        print(f"jacfuse {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``melroi`` command line: one subcommand per pipeline stage.

Exit status: 0 on success, 1 for usage, configuration and missing-artifact
errors, 2 for failures while a stage is running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .exceptions import (ClassCoverageError, ConfigError, MelroiError, MissingArtifact,
                         StratificationError, ValidationError)
from .pipeline import STAGES, PipelineConfig, default_workers

log = logging.getLogger("melroi")

VALIDATION_ERRORS = (ConfigError, MissingArtifact, ValidationError, StratificationError,
                     ClassCoverageError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $MELROI_WORKERS or 1)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--output", default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="melroi", description="Patch-based melanocytic ROI detection pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic cohort",
        "extract": "split slides, detect tissue, normalize stains, compute patch features",
        "train": "fit the patch classifier",
        "score": "score every tissue patch",
        "classify": "slide labels and ROI patches for the test slides",
        "evaluate": "accuracy and IoU on the test slides (summary table)",
        "sweep": "training-fraction robustness sweep (one row per fraction)",
        "visualize": "overlay, boundary and heatmap renderings",
    }
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nmelroi: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = PipelineConfig.load(args.config, output=args.output, seed=args.seed)
        result = STAGES[args.command](cfg, workers)
    except VALIDATION_ERRORS as exc:
        print(f"melroi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (MelroiError, OSError, ValueError, ArithmeticError) as exc:
        print(f"melroi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    if args.command in ("evaluate", "sweep"):
        print(result.table(), end="")
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

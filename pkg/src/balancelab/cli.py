"""Command-line entry point: collect / train / adapt / control / eval.

Every subcommand takes --config (experiment description), --out (artifact
directory) and --seed (overrides the config seed).  Exit status is 0 on
success; failures print one machine-parsable line to stderr:

    error: <stage>: <message>
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .experiment import ExperimentConfig, StageError, load_config

STAGES = ("collect", "train", "adapt", "control", "eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancelab",
        description="learned ankle-balance pipeline on the desk-scale plant")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="stage", required=True)
    helps = {
        "collect": "record episodes for every configured body state",
        "train": "fit the dynamics model and per-state bias vectors",
        "adapt": "run online bias adaptation against held-out body states",
        "control": "run the push-recovery protocol for each condition",
        "eval": "compute metrics, plot-ready CSVs and figures",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, help=helps[stage])
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    return parser


def _reseed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
    return cfg


def run_stage(stage: str, cfg: ExperimentConfig, out: Path) -> Path:
    fn = {
        "collect": experiment.stage_collect,
        "train": experiment.stage_train,
        "adapt": experiment.stage_adapt,
        "control": experiment.stage_control,
        "eval": experiment.stage_eval,
    }[stage]
    return fn(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _reseed(load_config(args.config), args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifact = run_stage(args.stage, cfg, out)
    except (StageError, OSError, ValueError) as exc:
        print(f"error: {args.stage}: {exc}", file=sys.stderr)
        return 2
    print(artifact)
    return 0


if __name__ == "__main__":
    sys.exit(main())

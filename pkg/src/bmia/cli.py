"""Command-line entry point.

Exit codes: 0 success, 1 a stage failed, 2 the configuration is invalid.
"""
from __future__ import annotations

import argparse
import logging
import sys

from bmia.config import ConfigError, ExperimentConfig, load_config
from bmia.pipeline import (
    STAGES,
    StageError,
    run_experiment,
    run_stage,
    run_toy_regression_demo,
    run_verify_theory,
)

COMMANDS = (*STAGES, "demo-regression", "verify-theory", "run")
EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("bmia")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmia", description="Membership inference auditing toolkit.")
    p.add_argument("command", nargs="?", choices=COMMANDS, default=None,
                   help="stage or task to run (default: run)")
    p.add_argument("--config", help="INI experiment config; defaults apply when omitted")
    p.add_argument("--out", help="output directory (overrides [experiment] output_dir)")
    p.add_argument("--stage", choices=COMMANDS, help="same as the positional command")
    p.add_argument("--seed-override", type=int, metavar="U64",
                   help="add this offset to every seed in the config (mod 2**64)")
    p.add_argument("--threads", type=int, default=1, help="parallel reference-model training")
    return p


def _resolve(args) -> tuple[str, ExperimentConfig]:
    if args.command and args.stage and args.command != args.stage:
        raise ConfigError(f"command {args.command!r} conflicts with --stage {args.stage!r}")
    command = args.command or args.stage or "run"
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed_override is not None:
        if not 0 <= args.seed_override < 2**64:
            raise ConfigError("--seed-override must be an unsigned 64-bit integer")
        cfg = cfg.with_seed_offset(args.seed_override)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return command, cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        command, cfg = _resolve(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out_dir = args.out or cfg.output_dir
    try:
        if command == "verify-theory":
            seed = args.seed_override or 0
            table, ok = run_verify_theory(seed, out_dir if args.out else None)
            print(table)
            return EXIT_OK if ok else EXIT_STAGE
        if command == "demo-regression":
            summary = run_toy_regression_demo(cfg, out_dir)
            log.info("demo written to %s (BNN coverage %.3f)", out_dir,
                     summary["bnn_test_coverage"])
        elif command == "run":
            reports = run_experiment(cfg, out_dir, args.threads)
            for r in reports:
                log.info("%-14s tpr@1%%fpr=%.4f auc=%.4f", r.attack_name, r.tpr_at[0.01], r.auc)
        else:
            run_stage(command, cfg, out_dir, args.threads)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

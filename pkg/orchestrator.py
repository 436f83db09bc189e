#!/usr/bin/env python3
"""
OT Pseudo-Label Pipeline Orchestrator

CLI driver for the four pipeline stages (score model, pseudo-labels,
knowledge-graph training, evaluation) plus synthetic data and ablations.
"""

import argparse
import logging
import sys

from src.config import Config, load_run_config
from src.errors import PipelineError
from src.pipeline import COMMANDS

# Stages that accept a progress-bar flag
PROGRESS_STAGES = {'score-train', 'kg-train'}


def setup_logging(verbose=False, quiet=False):
    """Setup logging configuration"""
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, (Config.LOG_LEVEL or 'INFO').upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        force=True
    )


def build_parser():
    parser = argparse.ArgumentParser(
        description="OT Pseudo-Label Pipeline Orchestrator",
        epilog="""
Examples:
  uv run orchestrator.py synth --config configs/desk.toml          # Synthetic embeddings + KG
  uv run orchestrator.py score-train --config configs/desk.toml    # Train the pair scorer
  uv run orchestrator.py pseudo --config configs/desk.toml         # OT pseudo-labels
  uv run orchestrator.py kg-train --config configs/desk.toml       # KG embedding with pseudo edges
  uv run orchestrator.py eval --config configs/desk.toml           # Hits@K / screening metrics
  uv run orchestrator.py ablate --config configs/desk.toml --seed 3 -v
        """,
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    subparsers = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=f"Run the {name} stage")
        sub.add_argument('--config', required=True, metavar='PATH', help='Run configuration (TOML)')
        sub.add_argument('--seed', type=int, metavar='N', help='Override the global seed')
        sub.add_argument('--out', metavar='DIR', help='Override the output directory')
        sub.add_argument('--quiet', action='store_true', help='Only log warnings and errors')
        sub.add_argument('-v', '--verbose', action='store_true', help='Enable verbose logging')

    return parser


def main(argv=None):
    """Main CLI entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.verbose, args.quiet)
    logger = logging.getLogger(__name__)

    try:
        cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
        logger.info(f"🚀 {args.command} (seed {cfg.seed}, out {cfg.paths.out_dir})")

        command = COMMANDS[args.command]
        if args.command in PROGRESS_STAGES:
            files = command(cfg, progress=not args.quiet)
        else:
            files = command(cfg)

        logger.info(f"🎉 {args.command} completed")
        for path in files.values():
            logger.info(f"📄 Output file: {path}")
        return 0

    except PipelineError as e:
        logger.error(f"❌ {e}")
        return 1
    except Exception as e:
        logger.error(f"❌ Process failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point and exit-code handling."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from prefrank import __version__
from prefrank.commands import cmd_data, cmd_eval, cmd_train
from prefrank.config import load_run_config, settings
from prefrank.errors import NonFiniteError, PrefRankError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Flat key = value run configuration")
    common.add_argument("--seed", type=int, help="Overrides the seed key")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key (repeatable)"
    )
    common.add_argument("--threads", type=int, help="Worker threads (default: PREFRANK_THREADS or 1)")
    common.add_argument("--log-level", help="Logging level (default: PREFRANK_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(
        prog="prefrank",
        description="Multi-task graph recommender for implicit feedback"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for module in (cmd_data, cmd_train, cmd_eval):
        module.register(subparsers, [common])
    return parser


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format=settings.log_format,
        force=True
    )


def exit_code_for(exc: PrefRankError) -> int:
    """Numerical failures exit 3; every other prefrank error exits 2."""
    return EXIT_NUMERIC if isinstance(exc, NonFiniteError) else EXIT_USAGE


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, dispatch the command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
    except ValueError as e:
        parser.error(f"--log-level: {e}")

    if args.threads is None:
        args.threads = settings.threads
    elif args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")

    try:
        config = load_run_config(args.config, args.overrides, args.seed)
        return args.handler(args, config)
    except NonFiniteError as e:
        logger.error(f"Numerical failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except PrefRankError as e:
        logger.debug(f"{type(e).__name__}: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

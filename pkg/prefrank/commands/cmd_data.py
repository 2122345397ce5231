"""Corpus commands: prepare and stats."""

import argparse
import logging
from pathlib import Path

from prefrank.config import RunConfig
from prefrank.dataio import corpus_stats, kcore_filter, load_interactions, read_corpus, split, write_corpus
from prefrank.errors import ConfigError

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction, parents: list[argparse.ArgumentParser]) -> None:
    prepare = subparsers.add_parser(
        "prepare",
        parents=parents,
        help="Filter, split and write a canonical corpus from a raw interaction file"
    )
    prepare.add_argument("--raw", type=Path, help="Raw interaction file (overrides raw_path)")
    prepare.add_argument("--format", choices=["pairs", "adjacency"], help="Raw layout (overrides raw_format)")
    prepare.add_argument("--min-core", type=int, help="k-core threshold (overrides min_core)")
    prepare.add_argument("--out", type=Path, help="Corpus file to write (overrides corpus_path)")
    prepare.set_defaults(handler=cmd_prepare)

    stats = subparsers.add_parser("stats", parents=parents, help="Print statistics of a canonical corpus")
    stats.add_argument("--corpus", type=Path, help="Corpus file (overrides corpus_path)")
    stats.set_defaults(handler=cmd_stats)


def cmd_prepare(args: argparse.Namespace, config: RunConfig) -> int:
    """Load raw interactions, k-core filter, split per user and write the corpus.

    Args:
        args: Parsed command line.
        config: Run configuration with flag overrides not yet applied.

    Returns:
        Process exit code.

    Raises:
        ConfigError: If no raw file is configured.
        DataFormatError: If the raw file is malformed.
        CorpusEliminatedError: If filtering leaves nothing.
    """
    overrides = {
        key: value
        for key, value in (
            ("raw_path", args.raw),
            ("raw_format", args.format),
            ("min_core", args.min_core),
            ("corpus_path", args.out),
        )
        if value is not None
    }
    if overrides:
        config = config.with_overrides(overrides)
    if config.raw_path is None:
        raise ConfigError("prepare needs a raw file (--raw or raw_path)")

    logger.info(f"Preparing {config.raw_path} ({config.raw_format.value}, min_core={config.min_core})")
    corpus = kcore_filter(load_interactions(config.raw_path, config.raw_format), config.min_core)
    data = split(corpus, config.test_frac, config.valid_frac, config.seed)
    write_corpus(data, config.corpus_path)

    for line in corpus_stats(data).summary_lines():
        print(line)
    return 0


def cmd_stats(args: argparse.Namespace, config: RunConfig) -> int:
    """Print users, items, interactions, density and split sizes."""
    data = read_corpus(args.corpus if args.corpus is not None else config.corpus_path)
    for line in corpus_stats(data).summary_lines():
        print(line)
    return 0

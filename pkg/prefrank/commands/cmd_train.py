"""Training commands: train and grid."""

import argparse
import itertools
import logging
from pathlib import Path
from typing import Any

from prefrank.config import RunConfig, parse_override
from prefrank.dataio import read_corpus
from prefrank.errors import ConfigError
from prefrank.reports import write_grid_summary, write_metrics_report
from prefrank.services.evaluation_service import evaluate
from prefrank.services.run_service import output_lock, train_run

logger = logging.getLogger(__name__)

# Learning rate, L2 coefficient and dropout candidates searched by default
DEFAULT_GRID = {
    "lr": ["5e-4", "1e-4"],
    "l2": ["1e-6", "5e-7"],
    "dropout": ["0.1", "0.2"],
}

GRID_SUMMARY_NAME = "grid_summary.csv"


def register(subparsers: argparse._SubParsersAction, parents: list[argparse.ArgumentParser]) -> None:
    train = subparsers.add_parser("train", parents=parents, help="Train one configuration with early stopping")
    train.add_argument("--corpus", type=Path, help="Corpus file (overrides corpus_path)")
    train.add_argument("--out", type=Path, help="Run directory (overrides output_dir)")
    train.set_defaults(handler=cmd_train)

    grid = subparsers.add_parser("grid", parents=parents, help="Train every combination of hyper-parameter axes")
    grid.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="KEY=V1,V2",
        help="Axis to search (repeatable); default lr x l2 x dropout"
    )
    grid.add_argument("--corpus", type=Path, help="Corpus file (overrides corpus_path)")
    grid.add_argument("--out", type=Path, help="Parent directory of the run directories")
    grid.set_defaults(handler=cmd_grid)


def _path_overrides(args: argparse.Namespace, config: RunConfig) -> RunConfig:
    overrides = {}
    if args.corpus is not None:
        overrides["corpus_path"] = args.corpus
    if args.out is not None:
        overrides["output_dir"] = args.out
    return config.with_overrides(overrides) if overrides else config


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Fit one configuration; writes the best checkpoint and the epoch log."""
    config = _path_overrides(args, config)
    data = read_corpus(config.corpus_path)
    outcome = train_run(data, config, threads=args.threads)
    result = outcome.result
    print(f"Best epoch {result.best_epoch} of {result.epochs_run}")
    print(f"Validation Recall@{config.top_n}={result.best_val_recall:.4f} NDCG@{config.top_n}={result.best_val_ndcg:.4f}")
    print(f"Checkpoint {outcome.checkpoint}")
    print(f"Epoch log  {outcome.epoch_log}")
    return 0


def parse_grid_axes(items: list[str]) -> dict[str, list[str]]:
    """``key=v1,v2`` strings to an ordered dict of axes."""
    if not items:
        return dict(DEFAULT_GRID)
    axes: dict[str, list[str]] = {}
    for item in items:
        key, raw = parse_override(item)
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"--grid {key} has no values")
        if key in axes:
            raise ConfigError(f"--grid {key} given twice")
        axes[key] = values
    return axes


def grid_runs(
    config: RunConfig,
    axes: dict[str, list[str]],
    base_dir: Path
) -> list[tuple[str, dict[str, str], RunConfig]]:
    """Validated configs for the cartesian product of ``axes``, one directory each."""
    runs = []
    for combo in itertools.product(*axes.values()):
        values = dict(zip(axes, combo))
        name = "_".join(f"{key}={value}" for key, value in values.items())
        runs.append((name, values, config.with_overrides({**values, "output_dir": base_dir / name})))
    return runs


def cmd_grid(args: argparse.Namespace, config: RunConfig) -> int:
    """Train, validate and test every grid combination; writes grid_summary.csv."""
    config = _path_overrides(args, config)
    axes = parse_grid_axes(args.grid)
    base_dir = Path(config.output_dir)
    runs = grid_runs(config, axes, base_dir)
    data = read_corpus(config.corpus_path)
    logger.info(f"Grid over {', '.join(axes)}: {len(runs)} run(s) under {base_dir}")

    rows: list[dict[str, Any]] = []
    with output_lock(base_dir):
        for index, (name, values, run_config) in enumerate(runs, start=1):
            logger.info(f"Grid run {index}/{len(runs)}: {name}")
            outcome = train_run(data, run_config, threads=args.threads)
            report = evaluate(outcome.model, data, n=run_config.top_n, split="test", threads=args.threads)
            write_metrics_report(run_config.resolved_report_dir / "metrics_test.csv", report)
            row: dict[str, Any] = {"run": name}
            row.update(values)
            row.update({
                "best_epoch": str(outcome.result.best_epoch),
                f"val_recall@{run_config.top_n}": outcome.result.best_val_recall,
                f"val_ndcg@{run_config.top_n}": outcome.result.best_val_ndcg,
                f"test_recall@{run_config.top_n}": report.recall_at_n,
                f"test_ndcg@{run_config.top_n}": report.ndcg_at_n,
            })
            rows.append(row)
            print(f"{name}\t{report.summary()}")

    summary = write_grid_summary(base_dir / GRID_SUMMARY_NAME, rows)
    print(f"Grid summary {summary}")
    return 0

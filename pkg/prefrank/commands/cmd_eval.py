"""Evaluation commands: evaluate and recommend."""

import argparse
import logging
from pathlib import Path

from prefrank.config import RunConfig
from prefrank.dataio import SplitCorpus, read_corpus
from prefrank.errors import ConfigError
from prefrank.reports import write_grid_summary, write_metrics_report, write_per_user_report
from prefrank.services.evaluation_service import evaluate, recommend
from prefrank.services.run_service import CHECKPOINT_NAME, LoadedModel, load_model

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction, parents: list[argparse.ArgumentParser]) -> None:
    evaluate_parser = subparsers.add_parser(
        "evaluate",
        parents=parents,
        help="Full-ranking Recall@N and NDCG@N of a checkpoint"
    )
    _add_model_arguments(evaluate_parser)
    evaluate_parser.add_argument("--split", choices=["test", "validation"], default="test")
    evaluate_parser.add_argument("--per-user", action="store_true", help="Also write per-user metrics")
    evaluate_parser.add_argument("--per-task", action="store_true", help="Also score each representation set alone")
    evaluate_parser.add_argument("--report-dir", type=Path, help="Where reports go (overrides report_dir)")
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    recommend_parser = subparsers.add_parser("recommend", parents=parents, help="Top-N items for one user")
    _add_model_arguments(recommend_parser)
    recommend_parser.add_argument("--user", required=True, help="Original user key")
    recommend_parser.set_defaults(handler=cmd_recommend)


def _add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", type=Path, help=f"Checkpoint file (default: output_dir/{CHECKPOINT_NAME})")
    parser.add_argument("--corpus", type=Path, help="Corpus file (overrides corpus_path)")
    parser.add_argument("--n", type=int, help="Ranking cutoff (overrides top_n)")


def _load(args: argparse.Namespace, config: RunConfig) -> tuple[SplitCorpus, LoadedModel, int]:
    corpus_path = args.corpus if args.corpus is not None else config.corpus_path
    checkpoint = args.checkpoint if args.checkpoint is not None else config.output_dir / CHECKPOINT_NAME
    n = args.n if args.n is not None else config.top_n
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    data = read_corpus(corpus_path)
    return data, load_model(checkpoint, data), n


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """Score a checkpoint and write metrics reports.

    Writes ``metrics_<split>.csv`` and, on request, ``per_user_<split>.csv``
    and ``per_task_<split>.csv`` into the report directory.
    """
    data, loaded, n = _load(args, config)
    report_dir = args.report_dir if args.report_dir is not None else config.resolved_report_dir

    report = evaluate(loaded.model, data, n=n, split=args.split, per_user=args.per_user, threads=args.threads)
    write_metrics_report(report_dir / f"metrics_{args.split}.csv", report)
    if args.per_user:
        write_per_user_report(report_dir / f"per_user_{args.split}.csv", report, data.corpus.user_keys)
    print(report.summary())

    if args.per_task:
        rows = []
        for layer in range(loaded.model.config.num_tasks):
            task_report = evaluate(
                loaded.model, data, n=n, split=args.split, threads=args.threads, layers=[layer]
            )
            rows.append({
                "task": str(layer),
                f"recall@{n}": task_report.recall_at_n,
                f"ndcg@{n}": task_report.ndcg_at_n,
            })
            print(f"task {layer}: {task_report.summary()}")
        write_grid_summary(report_dir / f"per_task_{args.split}.csv", rows)
    return 0


def cmd_recommend(args: argparse.Namespace, config: RunConfig) -> int:
    """Print ``item_key<TAB>score`` lines, best first."""
    data, loaded, n = _load(args, config)
    user = data.corpus.user_index.get(args.user)
    if user is None:
        raise ConfigError(f"unknown user {args.user!r}")

    item_keys = data.corpus.item_keys
    for item, value in recommend(loaded.model, data, user, n):
        print(f"{item_keys[item]}\t{value:.6f}")
    return 0

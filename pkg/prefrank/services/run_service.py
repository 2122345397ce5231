"""Run orchestration: output locking, model checkpoints and the training pipeline."""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

from prefrank.compute.checkpoint import load_checkpoint, save_checkpoint
from prefrank.compute.params import ParamStore
from prefrank.config import RunConfig, build_run_config, parse_config_text
from prefrank.dataio import SplitCorpus
from prefrank.errors import CheckpointError, ConfigError, LockError, NonFiniteError
from prefrank.graph import BipartiteGraph, build_graph
from prefrank.model import GraphRecommender, init_params, param_shapes
from prefrank.models import FitResult
from prefrank.services.training_service import fit, refit

logger = logging.getLogger(__name__)

LOCK_NAME = ".prefrank.lock"
CHECKPOINT_NAME = "best.ckpt"
EPOCH_LOG_NAME = "epochs.csv"
CONFIG_NAME = "run.conf"

GRAPH_TRAIN = "train"
GRAPH_TRAIN_VALIDATION = "train+validation"


@contextmanager
def output_lock(directory: Union[str, Path]) -> Iterator[Path]:
    """Hold ``directory/.prefrank.lock`` for the duration of the block.

    Raises:
        LockError: If the lock file already exists.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise LockError(f"{directory} is in use by another run (remove {lock_path} if stale)") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)


def checkpoint_metadata(
    data: SplitCorpus,
    epoch: int,
    graph_source: str,
    val_recall: Optional[float] = None,
    val_ndcg: Optional[float] = None
) -> dict[str, str]:
    meta = {
        "num_users": str(data.num_users),
        "num_items": str(data.num_items),
        "epoch": str(epoch),
        "graph_source": graph_source,
    }
    if val_recall is not None:
        meta["val_recall"] = repr(val_recall)
    if val_ndcg is not None:
        meta["val_ndcg"] = repr(val_ndcg)
    return meta


def save_model(
    path: Union[str, Path],
    store: ParamStore,
    config: RunConfig,
    metadata: dict[str, str]
) -> Path:
    """Checkpoint ``store`` with the canonical config text echoed beside it."""
    return save_checkpoint(path, store, config.to_text(), metadata)


@dataclass
class LoadedModel:
    """A checkpoint restored against a corpus."""

    model: GraphRecommender
    config: RunConfig
    metadata: dict[str, str]


def load_model(path: Union[str, Path], data: SplitCorpus) -> LoadedModel:
    """Restore a checkpoint and rebuild the graph it was trained on.

    Args:
        path: Checkpoint file.
        data: Split corpus the checkpoint is expected to match.

    Returns:
        LoadedModel bound to the rebuilt graph.

    Raises:
        CheckpointError: If the file is unreadable, its config does not
            parse, or its shapes disagree with the corpus.
    """
    # Parse the embedded config
    checkpoint = load_checkpoint(path)
    try:
        config = build_run_config(parse_config_text(checkpoint.config_text, source=f"{path}[config]"))
    except ConfigError as e:
        raise CheckpointError(f"{path}: embedded config is invalid ({e})") from e

    # Validate against the corpus
    meta = checkpoint.metadata
    expected = (str(data.num_users), str(data.num_items))
    found = (meta.get("num_users"), meta.get("num_items"))
    if found != expected:
        raise CheckpointError(
            f"{path}: checkpoint was trained on m={found[0]}, n={found[1]} "
            f"but corpus has m={expected[0]}, n={expected[1]}"
        )

    # Rebuild the graph the model was trained on
    graph_source = meta.get("graph_source", GRAPH_TRAIN)
    if graph_source not in (GRAPH_TRAIN, GRAPH_TRAIN_VALIDATION):
        raise CheckpointError(f"{path}: unknown graph_source {graph_source!r}")
    graph = build_graph(data, include_validation=graph_source == GRAPH_TRAIN_VALIDATION)

    # Check shapes
    network = config.network()
    shapes = param_shapes(network, graph.num_entities)
    if checkpoint.store.shapes != shapes:
        raise CheckpointError(f"{path}: parameter shapes do not match its config and the corpus")
    return LoadedModel(GraphRecommender(checkpoint.store, graph, network), config, meta)


@dataclass
class TrainOutcome:
    checkpoint: Path
    epoch_log: Path
    result: FitResult
    model: GraphRecommender


def train_run(
    data: SplitCorpus,
    config: RunConfig,
    threads: int = 1,
    output_dir: Optional[Path] = None
) -> TrainOutcome:
    """Initialise, fit with early stopping and checkpoint one configuration.

    The best model is written whenever validation Recall@N improves, so a
    numerical abort leaves the last good checkpoint on disk. With
    ``merge_validation`` a fresh model is then trained for the best epoch
    count on train ∪ validation and replaces the checkpoint.

    Raises:
        LockError: If the output directory is already in use.
        NonFiniteError: On a numerical failure during training.
    """
    output_dir = Path(output_dir if output_dir is not None else config.output_dir)
    checkpoint_path = output_dir / CHECKPOINT_NAME
    log_path = output_dir / EPOCH_LOG_NAME

    with output_lock(output_dir):
        (output_dir / CONFIG_NAME).write_text(config.to_text(), encoding="utf-8")
        network = config.network()
        graph = build_graph(data)
        store = init_params(network, graph.num_entities, config.seed)

        def on_improvement(best: ParamStore, stats) -> None:
            save_model(
                checkpoint_path,
                best,
                config,
                checkpoint_metadata(data, stats.epoch, GRAPH_TRAIN, stats.val_recall, stats.val_ndcg),
            )

        try:
            best_store, result = fit(
                store, graph, data, config, threads=threads, log_path=log_path, on_improvement=on_improvement
            )
        except NonFiniteError as e:
            kept = "kept" if checkpoint_path.exists() else "none written"
            logger.error(f"Training aborted: {e}; last good checkpoint {kept} at {checkpoint_path}")
            raise

        logger.info(
            f"Best epoch {result.best_epoch}: val_recall@{config.top_n}={result.best_val_recall:.4f} "
            f"val_ndcg@{config.top_n}={result.best_val_ndcg:.4f}"
        )
        final_graph: BipartiteGraph = graph
        if config.merge_validation:
            logger.info(f"Refitting {result.best_epoch} epoch(s) on train+validation")
            best_store, final_graph = refit(data, config, result.best_epoch)
            save_model(
                checkpoint_path,
                best_store,
                config,
                checkpoint_metadata(data, result.best_epoch, GRAPH_TRAIN_VALIDATION),
            )

    return TrainOutcome(
        checkpoint=checkpoint_path,
        epoch_log=log_path,
        result=result,
        model=GraphRecommender(best_store, final_graph, network),
    )

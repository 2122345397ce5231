"""Multi-task BPR training: negative sampling, per-layer losses, Adam, early stopping."""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from prefrank.compute import tensor as ops
from prefrank.compute.params import ParamStore, adam_step
from prefrank.compute.tensor import GradTape, Tensor
from prefrank.config import L2Scope, ModelConfig, RunConfig, TrainConfig
from prefrank.dataio import SplitCorpus, SplitPart
from prefrank.errors import ConfigError, SamplingError
from prefrank.graph import BipartiteGraph, build_graph
from prefrank.model import EMBEDDING, Mode, eval_embeddings, forward, forward_all, init_params
from prefrank.models import EpochStats, FitResult
from prefrank.reports import write_epoch_log
from prefrank.services.evaluation_service import Evaluator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TripletBatch:
    """Parallel arrays of triplets ``(u, i, j)``: i is a training positive, j is not."""

    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


class NegativeSampler:
    """Uniform rejection sampling over items a user has not trained on."""

    def __init__(self, data: SplitCorpus, include_validation: bool = False):
        parts = [SplitPart.TRAIN] + ([SplitPart.VALIDATION] if include_validation else [])
        pairs = data.pairs(*parts)
        self.num_items = data.num_items
        self._keys = pairs[:, 0] * self.num_items + pairs[:, 1]
        self._counts = np.bincount(pairs[:, 0], minlength=data.num_users)

    def _collides(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        if len(self._keys) == 0:
            return np.zeros(len(keys), dtype=bool)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def _check(self, users: np.ndarray) -> None:
        full = self._counts[users] >= self.num_items
        if np.any(full):
            user = int(users[np.argmax(full)])
            raise SamplingError(f"user {user} has interacted with all {self.num_items} items")

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One negative item per entry of ``users``."""
        users = np.asarray(users, dtype=np.int64)
        self._check(users)
        items = rng.integers(self.num_items, size=len(users))
        pending = self._collides(users, items)
        while pending.any():
            items[pending] = rng.integers(self.num_items, size=int(pending.sum()))
            pending[pending] = self._collides(users[pending], items[pending])
        return items

    def sample_one(self, user: int, rng: np.random.Generator) -> int:
        return int(self.sample(np.array([user], dtype=np.int64), rng)[0])


def sample_negatives(data: SplitCorpus, user: int, rng: np.random.Generator) -> int:
    """A uniformly drawn item ``j`` with ``(user, j)`` not in the training set."""
    return NegativeSampler(data).sample_one(user, rng)


def bpr_triplet_loss(margin: np.ndarray) -> np.ndarray:
    """``-ln σ(margin)`` for plain arrays."""
    return np.logaddexp(0.0, -np.asarray(margin, dtype=np.float64))


def bpr_loss(reps: Tensor, batch: TripletBatch, num_users: int) -> Tensor:
    """``L_l = -Σ ln σ(v_u·v_i - v_u·v_j)`` summed over the batch."""
    u = ops.gather_rows(reps, batch.users)
    i = ops.gather_rows(reps, batch.positives + num_users)
    j = ops.gather_rows(reps, batch.negatives + num_users)
    margin = ops.sub(ops.dot_rows(u, i), ops.dot_rows(u, j))
    return ops.scale(ops.sum_all(ops.log_sigmoid(margin)), -1.0)


def total_loss(losses: list[Tensor]) -> Tensor:
    """``L_total = (1/K) Σ L_l``."""
    return ops.mean_of(losses)


def batch_loss(
    params: dict[str, Tensor],
    graph: BipartiteGraph,
    config: ModelConfig,
    batch: TripletBatch,
    mode: Mode = Mode.TRAIN,
    rng: Optional[np.random.Generator] = None
) -> tuple[Tensor, list[Tensor]]:
    """Per-task BPR losses scaled by ``1/|batch|`` and their mean."""
    reps = forward_all(params, graph, config, mode, rng)
    factor = 1.0 / len(batch)
    tasks = [ops.scale(bpr_loss(reps[layer], batch, graph.num_users), factor) for layer in range(len(reps))]
    return total_loss(tasks), tasks


class Trainer:
    """Owns the random stream and sampler for one training run."""

    def __init__(
        self,
        store: ParamStore,
        graph: BipartiteGraph,
        data: SplitCorpus,
        network: ModelConfig,
        training: TrainConfig,
        include_validation: bool = False
    ):
        self.store = store
        self.graph = graph
        self.data = data
        self.network = network
        self.training = training
        self.rng = np.random.default_rng(training.seed)
        self.sampler = NegativeSampler(data, include_validation)
        parts = [SplitPart.TRAIN] + ([SplitPart.VALIDATION] if include_validation else [])
        self.pairs = data.pairs(*parts)
        if len(self.pairs) == 0:
            raise ConfigError("no training interactions to fit")
        self.l2_names = None if training.l2_scope is L2Scope.ALL else [EMBEDDING]

    def train_step(self, batch: TripletBatch) -> tuple[float, list[float]]:
        """Forward, backward and one Adam update on ``batch``."""
        tape = GradTape()
        params = self.store.watch(tape)
        total, tasks = batch_loss(params, self.graph, self.network, batch, Mode.TRAIN, self.rng)
        grads = tape.backward(total)
        self.store.set_gradients(grads)
        adam_step(
            self.store,
            grads,
            lr=self.training.lr,
            l2_coeff=self.training.l2,
            l2_names=self.l2_names
        )
        return float(total.value), [float(t.value) for t in tasks]

    def batches(self) -> list[TripletBatch]:
        """Shuffled training positives with freshly sampled negatives."""
        order = self.rng.permutation(len(self.pairs))
        size = self.training.batch_size
        result = []
        for start in range(0, len(order), size):
            rows = self.pairs[order[start:start + size]]
            users = rows[:, 0]
            # one negative per positive, redrawn every epoch
            result.append(TripletBatch(users, rows[:, 1], self.sampler.sample(users, self.rng)))
        return result

    def train_epoch(self, epoch: int = 1) -> EpochStats:
        """One pass over every training positive; returns mean per-triplet losses."""
        started = time.perf_counter()
        total_sum = 0.0
        task_sums = np.zeros(self.network.num_tasks)
        for batch in self.batches():
            total, tasks = self.train_step(batch)
            total_sum += total * len(batch)
            task_sums += np.asarray(tasks) * len(batch)
        count = len(self.pairs)
        return EpochStats(
            epoch=epoch,
            total_loss=total_sum / count,
            task_losses=(task_sums / count).tolist(),
            seconds=time.perf_counter() - started,
        )


def train_epoch(
    store: ParamStore,
    graph: BipartiteGraph,
    data: SplitCorpus,
    config: RunConfig
) -> EpochStats:
    """Single epoch with a fresh random stream seeded from ``config.seed``."""
    return Trainer(store, graph, data, config.network(), config.training()).train_epoch(1)


CheckpointCallback = Callable[[ParamStore, EpochStats], None]


def fit(
    store: ParamStore,
    graph: BipartiteGraph,
    data: SplitCorpus,
    config: RunConfig,
    threads: int = 1,
    log_path: Optional[Path] = None,
    on_improvement: Optional[CheckpointCallback] = None
) -> tuple[ParamStore, FitResult]:
    """Train with early stopping on validation Recall@N.

    After each epoch the model is evaluated on validation. The best store is
    kept; training stops once ``patience`` epochs pass without a strict
    improvement, or at ``max_epochs``.

    Args:
        store: Initial parameters; updated in place.
        graph: Graph built from the training interactions.
        data: Split corpus with a non-empty validation part.
        config: Run configuration.
        threads: Evaluation worker threads.
        log_path: Where to rewrite the epoch CSV after every epoch.
        on_improvement: Called with the best store whenever it improves.

    Returns:
        A copy of the best store and the run summary.

    Raises:
        ConfigError: If the validation split is empty.
        NonFiniteError: If the loss or a gradient becomes non-finite.
    """
    network = config.network()
    training = config.training()
    evaluator = Evaluator(data, split="validation", n=training.top_n, threads=threads)
    if len(evaluator.users) == 0:
        raise ConfigError("early stopping needs a non-empty validation split (valid_frac > 0)")

    trainer = Trainer(store, graph, data, network, training)
    best_store = store.copy()
    best_epoch = 0
    best_recall = -math.inf
    best_ndcg = 0.0
    since_best = 0
    history: list[EpochStats] = []

    logger.info(
        f"Training K={network.num_tasks} dims={network.layer_dims} aggregator={network.aggregator.value} "
        f"lr={training.lr} l2={training.l2} dropout={network.dropout} on {len(trainer.pairs)} positives"
    )
    for epoch in range(1, training.max_epochs + 1):
        stats = trainer.train_epoch(epoch)
        # score validation with dropout off
        report = evaluator.evaluate(eval_embeddings(forward(store, graph, network, Mode.EVAL)))
        stats = stats.model_copy(update={"val_recall": report.recall_at_n, "val_ndcg": report.ndcg_at_n})
        history.append(stats)
        if log_path is not None:
            write_epoch_log(log_path, history, n=training.top_n)

        # strict improvement only; ties keep the earlier epoch
        improved = report.recall_at_n > best_recall
        logger.info(
            f"Epoch {epoch}: loss={stats.total_loss:.6f} val_recall@{training.top_n}={report.recall_at_n:.4f} "
            f"val_ndcg@{training.top_n}={report.ndcg_at_n:.4f} ({stats.seconds:.1f}s){' *' if improved else ''}"
        )
        if improved:
            best_recall = report.recall_at_n
            best_ndcg = report.ndcg_at_n
            best_epoch = epoch
            best_store = store.copy()
            since_best = 0
            if on_improvement is not None:
                on_improvement(best_store, stats)
        else:
            since_best += 1

        # Early stopping
        if since_best >= training.patience:
            logger.info(f"Stopping after epoch {epoch}: best epoch {best_epoch}")
            break

    result = FitResult(
        best_epoch=best_epoch,
        best_val_recall=best_recall,
        best_val_ndcg=best_ndcg,
        epochs_run=len(history),
        history=history,
    )
    return best_store, result


def refit(data: SplitCorpus, config: RunConfig, epochs: int) -> tuple[ParamStore, BipartiteGraph]:
    """Train a fresh model for ``epochs`` epochs on train ∪ validation."""
    network = config.network()
    graph = build_graph(data, include_validation=True)
    store = init_params(network, graph.num_entities, config.seed)
    trainer = Trainer(store, graph, data, network, config.training(), include_validation=True)
    for epoch in range(1, epochs + 1):
        stats = trainer.train_epoch(epoch)
        logger.info(f"Refit epoch {epoch}/{epochs}: loss={stats.total_loss:.6f}")
    return store, graph

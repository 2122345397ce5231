"""Full-ranking evaluation with Recall@N and NDCG@N."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from prefrank.dataio import SplitCorpus, SplitPart
from prefrank.model import GraphRecommender
from prefrank.models import MetricsReport, UserMetrics

logger = logging.getLogger(__name__)

# Users per work unit handed to the thread pool
USER_BLOCK = 256


def top_n_from_scores(scores: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    """Highest-scoring unmasked item ids; ties go to the smaller id."""
    candidates = np.ones(len(scores), dtype=bool)
    candidates[np.asarray(mask, dtype=np.int64)] = False
    ids = np.flatnonzero(candidates)
    order = np.argsort(-scores[ids], kind="stable")
    return ids[order[:n]]


def user_scores(embeddings: np.ndarray, num_users: int, user: int) -> np.ndarray:
    """Scores of every item for ``user``; the single scoring path for ranking."""
    return embeddings[num_users:] @ embeddings[user]


def rank_items(embeddings: np.ndarray, num_users: int, user: int, mask: np.ndarray, n: int) -> np.ndarray:
    """Top-``n`` items for ``user`` by inner product, excluding ``mask``."""
    scores = user_scores(embeddings, num_users, user)
    return top_n_from_scores(scores, mask, n)


def recall_at_n(topn: Sequence[int], test_items: Sequence[int]) -> float:
    """``|topn ∩ test| / |test|``."""
    targets = set(int(i) for i in test_items)
    if not targets:
        raise ValueError("recall_at_n needs a non-empty target set")
    hits = sum(1 for i in topn if int(i) in targets)
    return hits / len(targets)


def ndcg_at_n(topn: Sequence[int], test_items: Sequence[int], n: Optional[int] = None) -> float:
    """Binary-relevance NDCG with gain ``1/log2(p+1)`` at 1-based position ``p``.

    The ideal DCG covers ``min(|test|, n)`` positions; ``n`` defaults to
    ``len(topn)``.
    """
    targets = set(int(i) for i in test_items)
    if not targets:
        raise ValueError("ndcg_at_n needs a non-empty target set")
    cutoff = len(topn) if n is None else n
    dcg = sum(
        1.0 / math.log2(position + 1)
        for position, item in enumerate(topn, start=1)
        if int(item) in targets
    )
    idcg = sum(1.0 / math.log2(position + 1) for position in range(1, min(len(targets), cutoff) + 1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


class Evaluator:
    """Scores one held-out part of a split against its masks.

    Test evaluation masks train ∪ validation; validation evaluation masks
    train only.
    """

    def __init__(self, data: SplitCorpus, split: str = "test", n: int = 20, threads: int = 1):
        if split not in ("test", "validation"):
            raise ValueError(f"split must be 'test' or 'validation', got {split!r}")
        self.data = data
        self.split = split
        self.n = n
        self.threads = max(1, threads)
        if split == "test":
            self.targets = data.user_items(SplitPart.TEST)
            self.masks = data.user_items(SplitPart.TRAIN, SplitPart.VALIDATION)
        else:
            self.targets = data.user_items(SplitPart.VALIDATION)
            self.masks = data.user_items(SplitPart.TRAIN)
        self.users = np.array([u for u, items in enumerate(self.targets) if len(items)], dtype=np.int64)
        skipped = data.num_users - len(self.users)
        if skipped:
            logger.debug(f"{skipped} user(s) have no {split} items and are skipped")

    def _score_block(self, embeddings: np.ndarray, users: np.ndarray) -> list[tuple[float, float]]:
        num_users = self.data.num_users
        results = []
        for user in users:
            topn = rank_items(embeddings, num_users, int(user), self.masks[user], self.n)
            targets = self.targets[user]
            results.append((recall_at_n(topn, targets), ndcg_at_n(topn, targets, self.n)))
        return results

    def evaluate(self, embeddings: np.ndarray, per_user: bool = False) -> MetricsReport:
        """Metrics for concatenated evaluation embeddings of shape ``(m+n, d)``."""
        expected_rows = self.data.num_users + self.data.num_items
        if embeddings.shape[0] != expected_rows:
            raise ValueError(f"embeddings have {embeddings.shape[0]} rows, expected {expected_rows}")

        blocks = [self.users[i:i + USER_BLOCK] for i in range(0, len(self.users), USER_BLOCK)]
        if self.threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                chunks = list(pool.map(lambda b: self._score_block(embeddings, b), blocks))
        else:
            chunks = [self._score_block(embeddings, b) for b in blocks]

        values = np.array([pair for chunk in chunks for pair in chunk], dtype=np.float64).reshape(-1, 2)
        recall = float(values[:, 0].mean()) if len(values) else 0.0
        ndcg = float(values[:, 1].mean()) if len(values) else 0.0

        rows = None
        if per_user:
            rows = [
                UserMetrics(user=int(u), recall=float(r), ndcg=float(g))
                for u, (r, g) in zip(self.users, values)
            ]
        return MetricsReport(
            n=self.n,
            split=self.split,
            recall_at_n=recall,
            ndcg_at_n=ndcg,
            num_users=len(self.users),
            per_user=rows,
        )


def evaluate(
    model: GraphRecommender,
    data: SplitCorpus,
    n: int = 20,
    split: str = "test",
    per_user: bool = False,
    threads: int = 1,
    layers: Optional[Sequence[int]] = None
) -> MetricsReport:
    """Eval-mode forward, concatenated embeddings, metrics over users with targets."""
    report = Evaluator(data, split=split, n=n, threads=threads).evaluate(
        model.embeddings(layers),
        per_user=per_user
    )
    logger.info(report.summary())
    return report


def recommend(model: GraphRecommender, data: SplitCorpus, user: int, n: int) -> list[tuple[int, float]]:
    """Top-``n`` (item, score) pairs for ``user`` excluding train and validation items."""
    embeddings = model.embeddings()
    mask = data.user_items(SplitPart.TRAIN, SplitPart.VALIDATION)[user]
    scores = user_scores(embeddings, data.num_users, user)
    topn = top_n_from_scores(scores, mask, n)
    return [(int(i), float(scores[i])) for i in topn]

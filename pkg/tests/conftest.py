"""Shared fixtures: tiny corpora, graphs and run configurations."""

from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pytest

from prefrank.config import RunConfig, build_run_config
from prefrank.dataio import InteractionCorpus, SplitCorpus, SplitPart


def corpus_from_pairs(
    pairs: Sequence[tuple[int, int]],
    parts: Optional[Sequence[SplitPart]] = None,
    num_users: Optional[int] = None,
    num_items: Optional[int] = None
) -> SplitCorpus:
    """SplitCorpus over dense ids with keys ``u<id>`` / ``i<id>``."""
    array = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    codes = np.asarray(
        [int(p) for p in parts] if parts is not None else [int(SplitPart.TRAIN)] * len(array),
        dtype=np.int8
    )
    m = num_users if num_users is not None else int(array[:, 0].max()) + 1
    n = num_items if num_items is not None else int(array[:, 1].max()) + 1
    order = np.lexsort((array[:, 1], array[:, 0]))
    corpus = InteractionCorpus(
        user_keys=tuple(f"u{u}" for u in range(m)),
        item_keys=tuple(f"i{i}" for i in range(n)),
        interactions=array[order],
    )
    return SplitCorpus(corpus=corpus, assignment=codes[order], seed=0, test_frac=0.2, valid_frac=0.125)


def random_corpus(
    rng: np.random.Generator,
    num_users: int,
    num_items: int,
    per_user: tuple[int, int] = (2, 4),
    part_probs: tuple[float, float, float] = (1.0, 0.0, 0.0)
) -> SplitCorpus:
    """Every user interacts with a random subset of items; parts drawn per pair."""
    pairs, parts = [], []
    for user in range(num_users):
        count = int(rng.integers(per_user[0], per_user[1] + 1))
        for item in sorted(rng.choice(num_items, size=min(count, num_items), replace=False)):
            pairs.append((user, int(item)))
            parts.append(SplitPart(int(rng.choice(3, p=part_probs))))
    return corpus_from_pairs(pairs, parts, num_users, num_items)


@pytest.fixture
def make_corpus() -> Callable[..., SplitCorpus]:
    return corpus_from_pairs


@pytest.fixture
def make_random_corpus() -> Callable[..., SplitCorpus]:
    return random_corpus


@pytest.fixture
def tiny_split() -> SplitCorpus:
    """5 users x 5 items; three training items per user, one validation, one test."""
    pairs, parts = [], []
    for user in range(5):
        for offset, part in enumerate(
            (SplitPart.TRAIN, SplitPart.TRAIN, SplitPart.TRAIN, SplitPart.VALIDATION, SplitPart.TEST)
        ):
            pairs.append((user, (user + offset) % 5))
            parts.append(part)
    return corpus_from_pairs(pairs, parts, 5, 5)


@pytest.fixture
def make_config(tmp_path: Path) -> Callable[..., RunConfig]:
    """Small, fast RunConfig writing under ``tmp_path``."""

    def _make(**overrides) -> RunConfig:
        values = {
            "corpus_path": tmp_path / "corpus.txt",
            "output_dir": tmp_path / "run",
            "num_tasks": 2,
            "layer_dims": "4,4",
            "dropout": 0.0,
            "lr": 0.01,
            "l2": 0.0,
            "batch_size": 64,
            "max_epochs": 5,
            "patience": 2,
            "top_n": 3,
            "seed": 7,
        }
        values.update(overrides)
        return build_run_config(values)

    return _make


def write_raw_pairs(path: Path, num_users: int = 30, num_items: int = 20, seed: int = 3) -> Path:
    """Raw pair file where every user has 6..12 items, plus a few duplicates."""
    rng = np.random.default_rng(seed)
    lines = []
    for user in range(num_users):
        for item in rng.choice(num_items, size=int(rng.integers(6, 13)), replace=False):
            lines.append(f"user{user}\titem{int(item)}")
    lines.extend(lines[:5])
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def raw_pairs_file(tmp_path: Path) -> Path:
    return write_raw_pairs(tmp_path / "raw.txt")

"""Interaction ingestion, k-core filtering, splitting and the canonical corpus file.

Raw files are either one ``user item`` pair per line or adjacency lines
``user item item ...``. After k-core filtering, ids are dense and assigned in
first-appearance order of the original keys. Splits are drawn per user from a
generator seeded by ``(seed, user_id)``.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Union

import numpy as np

from prefrank.config import InputFormat
from prefrank.errors import CorpusEliminatedError, CorpusFormatError, DataFormatError
from prefrank.models import CorpusStats

logger = logging.getLogger(__name__)

CORPUS_MAGIC = "PREFRANK-CORPUS"
CORPUS_VERSION = "v1"


class RawInteraction(NamedTuple):
    """One observed (user, item) token pair as it appears in a raw file."""

    user_key: str
    item_key: str


class SplitPart(IntEnum):
    """Membership code of an interaction; ``symbol`` is its on-disk letter."""

    TRAIN = 0
    VALIDATION = 1
    TEST = 2

    @property
    def symbol(self) -> str:
        return _PART_SYMBOLS[self]

    @classmethod
    def from_symbol(cls, symbol: str) -> "SplitPart":
        try:
            return _SYMBOL_PARTS[symbol]
        except KeyError:
            raise ValueError(f"unknown split symbol {symbol!r}") from None


_PART_SYMBOLS = {SplitPart.TRAIN: "T", SplitPart.VALIDATION: "V", SplitPart.TEST: "S"}
_SYMBOL_PARTS = {symbol: part for part, symbol in _PART_SYMBOLS.items()}


@dataclass(frozen=True, eq=False)
class InteractionCorpus:
    """Deduplicated interactions with dense ids.

    ``interactions`` is an ``(k, 2)`` int64 array of ``(user_id, item_id)``
    rows sorted lexicographically.
    """

    user_keys: tuple[str, ...]
    item_keys: tuple[str, ...]
    interactions: np.ndarray

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    @property
    def num_items(self) -> int:
        return len(self.item_keys)

    @property
    def num_interactions(self) -> int:
        return int(self.interactions.shape[0])

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {key: uid for uid, key in enumerate(self.user_keys)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {key: iid for iid, key in enumerate(self.item_keys)}

    @cached_property
    def user_bounds(self) -> np.ndarray:
        """Offsets such that user ``u`` owns rows ``bounds[u]:bounds[u+1]``."""
        return np.searchsorted(self.interactions[:, 0], np.arange(self.num_users + 1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InteractionCorpus):
            return NotImplemented
        return (
            self.user_keys == other.user_keys
            and self.item_keys == other.item_keys
            and np.array_equal(self.interactions, other.interactions)
        )


@dataclass(frozen=True, eq=False)
class SplitCorpus:
    """A corpus whose interactions are partitioned into train, validation and test.

    ``assignment[r]`` is the :class:`SplitPart` code of ``corpus.interactions[r]``.
    """

    corpus: InteractionCorpus
    assignment: np.ndarray
    seed: int
    test_frac: float = 0.2
    valid_frac: float = 0.125
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_users(self) -> int:
        return self.corpus.num_users

    @property
    def num_items(self) -> int:
        return self.corpus.num_items

    def pairs(self, *parts: SplitPart) -> np.ndarray:
        """Interactions belonging to any of ``parts``, sorted by (user, item)."""
        mask = np.isin(self.assignment, [int(p) for p in parts])
        return self.corpus.interactions[mask]

    @property
    def train(self) -> np.ndarray:
        return self.pairs(SplitPart.TRAIN)

    @property
    def validation(self) -> np.ndarray:
        return self.pairs(SplitPart.VALIDATION)

    @property
    def test(self) -> np.ndarray:
        return self.pairs(SplitPart.TEST)

    def user_items(self, *parts: SplitPart) -> list[np.ndarray]:
        """Per-user sorted item arrays for the union of ``parts``."""
        key = tuple(sorted(int(p) for p in parts))
        cached = self._cache.get(key)
        if cached is None:
            selected = self.pairs(*parts)
            bounds = np.searchsorted(selected[:, 0], np.arange(self.num_users + 1))
            cached = [selected[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]
            self._cache[key] = cached
        return cached

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SplitCorpus):
            return NotImplemented
        return (
            self.corpus == other.corpus
            and np.array_equal(self.assignment, other.assignment)
            and self.seed == other.seed
            and self.test_frac == other.test_frac
            and self.valid_frac == other.valid_frac
        )


def load_interactions(
    path: Union[str, Path],
    fmt: InputFormat = InputFormat.PAIRS
) -> Iterator[RawInteraction]:
    """Yield every (user_key, item_key) token pair of a raw file in file order.

    Args:
        path: UTF-8 text file.
        fmt: ``pairs`` (two tokens per line) or ``adjacency``
            (a user token followed by one or more item tokens).

    Raises:
        DataFormatError: On a missing or empty file, undecodable text, or a
            line with the wrong number of tokens (reports the line number).
    """
    path = Path(path)
    fmt = InputFormat(fmt)
    if not path.is_file():
        raise DataFormatError(path, None, "file not found")

    count = 0
    with open(path, "rb") as f:
        for line_no, raw_line in enumerate(f, start=1):
            try:
                line = raw_line.decode("utf-8")
            except UnicodeDecodeError as e:
                raise DataFormatError(path, line_no, f"not valid UTF-8: {e.reason}") from e
            tokens = line.split()
            if not tokens:
                continue
            if fmt is InputFormat.PAIRS:
                if len(tokens) != 2:
                    raise DataFormatError(
                        path, line_no, f"expected 'user item', got {len(tokens)} token(s)"
                    )
                count += 1
                yield RawInteraction(tokens[0], tokens[1])
            else:
                if len(tokens) < 2:
                    raise DataFormatError(
                        path, line_no, "adjacency line needs a user and at least one item"
                    )
                for item_key in tokens[1:]:
                    count += 1
                    yield RawInteraction(tokens[0], item_key)

    if count == 0:
        raise DataFormatError(path, None, "empty interaction file")


def kcore_filter(raw: Iterable[RawInteraction], min_core: int = 10) -> InteractionCorpus:
    """Deduplicate pairs and peel users/items below ``min_core`` until a fixpoint.

    Raises:
        ValueError: If ``min_core < 1``.
        CorpusEliminatedError: If no interaction survives.
    """
    if min_core < 1:
        raise ValueError(f"min_core must be >= 1, got {min_core}")

    unique_pairs = dict.fromkeys((r.user_key, r.item_key) for r in raw)
    logger.info(f"Deduplicated to {len(unique_pairs)} distinct interactions")
    if not unique_pairs:
        raise CorpusEliminatedError(min_core)

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users = np.fromiter(
        (user_index.setdefault(u, len(user_index)) for u, _ in unique_pairs),
        dtype=np.int64,
        count=len(unique_pairs)
    )
    items = np.fromiter(
        (item_index.setdefault(i, len(item_index)) for _, i in unique_pairs),
        dtype=np.int64,
        count=len(unique_pairs)
    )

    keep = np.ones(len(users), dtype=bool)
    rounds = 0
    while True:
        user_degree = np.bincount(users[keep], minlength=len(user_index))
        item_degree = np.bincount(items[keep], minlength=len(item_index))
        survivors = keep & (user_degree[users] >= min_core) & (item_degree[items] >= min_core)
        rounds += 1
        if np.array_equal(survivors, keep):
            break
        keep = survivors
    logger.info(f"k-core ({min_core}) reached fixpoint after {rounds} round(s)")

    if not keep.any():
        raise CorpusEliminatedError(min_core)

    # np.unique sorts provisional ids, which are in first-appearance order
    kept_users = np.unique(users[keep])
    kept_items = np.unique(items[keep])
    user_remap = np.full(len(user_index), -1, dtype=np.int64)
    item_remap = np.full(len(item_index), -1, dtype=np.int64)
    user_remap[kept_users] = np.arange(len(kept_users))
    item_remap[kept_items] = np.arange(len(kept_items))

    all_user_keys = list(user_index)
    all_item_keys = list(item_index)
    interactions = np.column_stack([user_remap[users[keep]], item_remap[items[keep]]])
    order = np.lexsort((interactions[:, 1], interactions[:, 0]))

    return InteractionCorpus(
        user_keys=tuple(all_user_keys[t] for t in kept_users),
        item_keys=tuple(all_item_keys[t] for t in kept_items),
        interactions=interactions[order],
    )


def split_counts(degree: int, test_frac: float, valid_frac: float) -> tuple[int, int]:
    """Number of test and validation items for a user with ``degree`` interactions."""
    n_test = math.floor(test_frac * degree)
    if degree >= 2:
        n_test = max(1, n_test)
    n_test = min(n_test, degree - 1) if degree >= 2 else n_test
    remaining = degree - n_test
    n_valid = math.floor(valid_frac * remaining + 0.5)
    n_valid = min(n_valid, max(remaining - 1, 0))
    return n_test, n_valid


def split(
    corpus: InteractionCorpus,
    test_frac: float = 0.2,
    valid_frac: float = 0.125,
    seed: int = 42
) -> SplitCorpus:
    """Partition each user's items into train, validation and test.

    Test receives ``floor(test_frac * deg)`` items (at least one when the user
    has two or more); validation receives ``valid_frac`` of what remains,
    rounded half-up. Each user draws from its own generator seeded by
    ``(seed, user_id)``.
    """
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    if not 0.0 <= valid_frac <= 0.5:
        raise ValueError(f"valid_frac must be in [0, 0.5], got {valid_frac}")

    bounds = corpus.user_bounds
    assignment = np.full(corpus.num_interactions, int(SplitPart.TRAIN), dtype=np.int8)
    for user in range(corpus.num_users):
        lo, hi = int(bounds[user]), int(bounds[user + 1])
        n_test, n_valid = split_counts(hi - lo, test_frac, valid_frac)
        rng = np.random.default_rng([seed, user])
        rows = lo + rng.permutation(hi - lo)
        assignment[rows[:n_test]] = int(SplitPart.TEST)
        assignment[rows[n_test:n_test + n_valid]] = int(SplitPart.VALIDATION)

    result = SplitCorpus(
        corpus=corpus,
        assignment=assignment,
        seed=seed,
        test_frac=test_frac,
        valid_frac=valid_frac,
    )
    logger.info(
        f"Split {corpus.num_interactions} interactions: train={len(result.train)}, "
        f"validation={len(result.validation)}, test={len(result.test)}"
    )
    return result


def corpus_stats(data: Union[InteractionCorpus, SplitCorpus]) -> CorpusStats:
    """Users, items, interactions and (for splits) per-part counts."""
    if isinstance(data, SplitCorpus):
        counts = np.bincount(data.assignment, minlength=len(SplitPart))
        return CorpusStats(
            users=data.num_users,
            items=data.num_items,
            interactions=data.corpus.num_interactions,
            train=int(counts[SplitPart.TRAIN]),
            validation=int(counts[SplitPart.VALIDATION]),
            test=int(counts[SplitPart.TEST]),
        )
    return CorpusStats(
        users=data.num_users,
        items=data.num_items,
        interactions=data.num_interactions,
    )


def write_corpus(data: SplitCorpus, path: Union[str, Path]) -> Path:
    """Write the canonical text form of a split corpus.

    Layout::

        PREFRANK-CORPUS v1
        meta seed=<int> test_frac=<float> valid_frac=<float>
        users <m>
        <user_key>            (m lines, line order = user id)
        items <n>
        <item_key>            (n lines, line order = item id)
        interactions <k>
        <user_id> <item_id> <T|V|S>   (k lines, sorted by user then item)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus = data.corpus

    lines = [
        f"{CORPUS_MAGIC} {CORPUS_VERSION}",
        f"meta seed={data.seed} test_frac={data.test_frac!r} valid_frac={data.valid_frac!r}",
        f"users {corpus.num_users}",
        *corpus.user_keys,
        f"items {corpus.num_items}",
        *corpus.item_keys,
        f"interactions {corpus.num_interactions}",
    ]
    symbols = [SplitPart(code).symbol for code in range(len(SplitPart))]
    lines.extend(
        f"{u} {i} {symbols[code]}"
        for (u, i), code in zip(corpus.interactions.tolist(), data.assignment.tolist())
    )

    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
        f.write("\n")
    os.replace(tmp_path, path)
    logger.info(f"Wrote corpus to {path}")
    return path


class _LineReader:
    """Line cursor that reports positions in CorpusFormatError messages."""

    def __init__(self, path: Path, lines: list[str]):
        self.path = path
        self.lines = lines
        self.pos = 0

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise CorpusFormatError(f"{self.path}: unexpected end of file, expected {what}")
        self.pos += 1
        return self.lines[self.pos - 1]

    def fail(self, message: str) -> CorpusFormatError:
        return CorpusFormatError(f"{self.path}:{self.pos}: {message}")

    def section(self, name: str) -> int:
        tokens = self.next(f"'{name}' section").split()
        if len(tokens) != 2 or tokens[0] != name or not tokens[1].isdigit():
            raise self.fail(f"expected '{name} <count>'")
        return int(tokens[1])


def read_corpus(path: Union[str, Path]) -> SplitCorpus:
    """Read a file produced by :func:`write_corpus`.

    Raises:
        CorpusFormatError: On a missing header, an unsupported version or any
            malformed section.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusFormatError(f"corpus file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CorpusFormatError(f"{path}: not valid UTF-8") from e

    reader = _LineReader(path, text.splitlines())
    header = reader.next("header").split()
    if not header or header[0] != CORPUS_MAGIC:
        raise reader.fail(f"missing {CORPUS_MAGIC} header")
    if len(header) != 2 or header[1] != CORPUS_VERSION:
        found = header[1] if len(header) > 1 else "<none>"
        raise reader.fail(f"unsupported corpus version {found}, expected {CORPUS_VERSION}")

    meta_tokens = reader.next("meta line").split()
    if not meta_tokens or meta_tokens[0] != "meta":
        raise reader.fail("expected meta line")
    try:
        meta = dict(token.split("=", 1) for token in meta_tokens[1:])
        seed = int(meta["seed"])
        test_frac = float(meta["test_frac"])
        valid_frac = float(meta["valid_frac"])
    except (KeyError, ValueError) as e:
        raise reader.fail(f"bad meta line: {e}") from e

    user_keys = tuple(reader.next("user key").strip() for _ in range(reader.section("users")))
    item_keys = tuple(reader.next("item key").strip() for _ in range(reader.section("items")))
    if len(set(user_keys)) != len(user_keys) or len(set(item_keys)) != len(item_keys):
        raise CorpusFormatError(f"{path}: duplicate keys in id map")

    count = reader.section("interactions")
    interactions = np.empty((count, 2), dtype=np.int64)
    assignment = np.empty(count, dtype=np.int8)
    for row in range(count):
        tokens = reader.next("interaction").split()
        if len(tokens) != 3:
            raise reader.fail("expected '<user_id> <item_id> <T|V|S>'")
        try:
            interactions[row] = (int(tokens[0]), int(tokens[1]))
            assignment[row] = int(SplitPart.from_symbol(tokens[2]))
        except ValueError as e:
            raise reader.fail(str(e)) from e

    if count:
        if interactions[:, 0].min() < 0 or interactions[:, 0].max() >= len(user_keys):
            raise CorpusFormatError(f"{path}: user id out of range")
        if interactions[:, 1].min() < 0 or interactions[:, 1].max() >= len(item_keys):
            raise CorpusFormatError(f"{path}: item id out of range")

    order = np.lexsort((interactions[:, 1], interactions[:, 0]))
    interactions = interactions[order]
    assignment = assignment[order]
    if count > 1 and np.any(np.all(interactions[1:] == interactions[:-1], axis=1)):
        raise CorpusFormatError(f"{path}: duplicate interaction rows")

    corpus = InteractionCorpus(user_keys=user_keys, item_keys=item_keys, interactions=interactions)
    logger.info(f"Read corpus from {path}: m={corpus.num_users}, n={corpus.num_items}, k={count}")
    return SplitCorpus(
        corpus=corpus,
        assignment=assignment,
        seed=seed,
        test_frac=test_frac,
        valid_frac=valid_frac,
    )

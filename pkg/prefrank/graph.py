"""User-item bipartite graph in compressed sparse row form.

Entities are numbered ``0..m-1`` for users and ``m..m+n-1`` for items. The
adjacency holds no self-loops; :meth:`BipartiteGraph.segments` adds the self
entry that convolution needs.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from prefrank.dataio import SplitCorpus, SplitPart

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentIndex:
    """Flattened ``N(e) ∪ {e}`` lists, one contiguous segment per entity.

    Segment ``e`` occupies ``ptr[e]:ptr[e+1]`` of ``owner``/``member``; members
    are sorted by ascending entity id.
    """

    ptr: np.ndarray
    owner: np.ndarray
    member: np.ndarray

    @property
    def num_segments(self) -> int:
        return len(self.ptr) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)


class BipartiteGraph:
    """Immutable symmetric adjacency over users ∪ items."""

    def __init__(self, num_users: int, num_items: int, pairs: np.ndarray):
        """Build the graph from ``(user_id, item_id)`` rows.

        Args:
            num_users: m.
            num_items: n.
            pairs: ``(k, 2)`` integer array of interactions forming the edges.
        """
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        size = self.num_entities

        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rows = np.concatenate([pairs[:, 0], pairs[:, 1] + self.num_users])
        cols = np.concatenate([pairs[:, 1] + self.num_users, pairs[:, 0]])
        adjacency = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)),
            shape=(size, size)
        )
        adjacency.sum_duplicates()
        adjacency.sort_indices()
        self._adjacency = adjacency
        self.indptr = adjacency.indptr.astype(np.int64)
        self.indices = adjacency.indices.astype(np.int64)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

        logger.debug(f"Built bipartite graph: {size} entities, {self.num_edges} edges")

    @property
    def num_entities(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return int(len(self.indices) // 2)

    def _check(self, entity: int) -> int:
        entity = int(entity)
        if not 0 <= entity < self.num_entities:
            raise IndexError(f"entity {entity} out of range [0, {self.num_entities})")
        return entity

    def neighbors(self, entity: int) -> np.ndarray:
        """Sorted neighbor ids of ``entity``."""
        entity = self._check(entity)
        return self.indices[self.indptr[entity]:self.indptr[entity + 1]]

    def degree(self, entity: int) -> int:
        entity = self._check(entity)
        return int(self.indptr[entity + 1] - self.indptr[entity])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def item_entity(self, item_id: int) -> int:
        """Entity id of item ``item_id``."""
        return self.num_users + int(item_id)

    @cached_property
    def _segments(self) -> SegmentIndex:
        with_self = (self._adjacency + sp.identity(self.num_entities, dtype=np.int8, format="csr")).tocsr()
        with_self.sort_indices()
        ptr = with_self.indptr.astype(np.int64)
        member = with_self.indices.astype(np.int64)
        owner = np.repeat(np.arange(self.num_entities, dtype=np.int64), np.diff(ptr))
        for array in (ptr, owner, member):
            array.setflags(write=False)
        return SegmentIndex(ptr=ptr, owner=owner, member=member)

    def segments(self) -> SegmentIndex:
        """Segment index over ``N(e) ∪ {e}`` for every entity."""
        return self._segments


def build_graph(data: SplitCorpus, include_validation: bool = False) -> BipartiteGraph:
    """One undirected edge per training interaction.

    With ``include_validation`` the validation interactions become edges too
    (used when the final model is refit on train ∪ validation).
    """
    parts = [SplitPart.TRAIN]
    if include_validation:
        parts.append(SplitPart.VALIDATION)
    pairs = data.pairs(*parts)
    graph = BipartiteGraph(data.num_users, data.num_items, pairs)
    logger.info(
        f"Graph over {'train+validation' if include_validation else 'train'}: "
        f"{graph.num_entities} entities, {graph.num_edges} edges"
    )
    return graph

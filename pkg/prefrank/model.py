"""Embedding table plus stacked attentive graph convolution layers.

Layer ``l`` (``1 <= l < K``) maps ``R^{l-1}`` to ``R^l``::

    a_ej  = softmax over j in N(e) ∪ {e} of f(v_e, v_j)
    f(x,y) = σ(σ((x‖y) W_att1 + b1) W_att2 + b2)
    v^l_e = σ((Σ_j a_ej v^{l-1}_j) W^l)

The mean aggregator replaces ``a_ej`` with ``1 / (|N(e)| + 1)``.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from prefrank.compute import tensor as ops
from prefrank.compute.params import ParamStore
from prefrank.compute.tensor import GradTape, Tensor
from prefrank.config import Aggregator, ModelConfig
from prefrank.graph import BipartiteGraph

logger = logging.getLogger(__name__)

EMBEDDING = "embedding"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def layer_param_names(layer: int) -> dict[str, str]:
    prefix = f"layer{layer}"
    return {
        "weight": f"{prefix}.weight",
        "att1_weight": f"{prefix}.att1.weight",
        "att1_bias": f"{prefix}.att1.bias",
        "att2_weight": f"{prefix}.att2.weight",
        "att2_bias": f"{prefix}.att2.bias",
    }


def param_shapes(config: ModelConfig, num_entities: int) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable array for ``config``.

    Attention parameters exist only for the attentive aggregator.
    """
    dims = config.layer_dims
    shapes: dict[str, tuple[int, ...]] = {EMBEDDING: (num_entities, dims[0])}
    for layer in range(1, config.num_tasks):
        names = layer_param_names(layer)
        d_in, d_out = dims[layer - 1], dims[layer]
        shapes[names["weight"]] = (d_in, d_out)
        if config.aggregator is Aggregator.ATTENTIVE:
            hidden = config.attention_width(layer)
            shapes[names["att1_weight"]] = (2 * d_in, hidden)
            shapes[names["att1_bias"]] = (hidden,)
            shapes[names["att2_weight"]] = (hidden, 1)
            shapes[names["att2_bias"]] = (1,)
    return shapes


def init_params(config: ModelConfig, num_entities: int, seed: int) -> ParamStore:
    """Xavier-initialised parameter store for ``config``."""
    shapes = param_shapes(config, num_entities)
    store = ParamStore.initialize(shapes, seed=seed, dtype=np.dtype(config.dtype.value))
    logger.info(
        f"Initialised {len(shapes)} parameter arrays "
        f"({sum(int(np.prod(s)) for s in shapes.values())} values, {config.dtype.value})"
    )
    return store


@dataclass
class RepresentationSets:
    """The K representation matrices ``R^0 … R^{K-1}`` of one forward pass."""

    layers: list[Tensor]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: int) -> Tensor:
        return self.layers[layer]

    def matrices(self) -> list[np.ndarray]:
        return [t.value for t in self.layers]


def attention_weights(
    layer: int,
    graph: BipartiteGraph,
    prev: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig
) -> Tensor:
    """Per-segment weights ``a^l_ej`` laid out like ``graph.segments()``."""
    seg = graph.segments()
    if config.aggregator is Aggregator.MEAN:
        return ops.constant((1.0 / seg.sizes[seg.owner]).astype(prev.dtype))

    names = layer_param_names(layer)
    pairs = ops.concat_pairs(ops.gather_rows(prev, seg.owner), ops.gather_rows(prev, seg.member))
    hidden = ops.activate(
        ops.affine(pairs, params[names["att1_weight"]], params[names["att1_bias"]]),
        config.activation,
        config.negative_slope
    )
    logits = ops.activate(
        ops.affine(hidden, params[names["att2_weight"]], params[names["att2_bias"]]),
        config.logit_activation,
        config.negative_slope
    )
    return ops.segment_softmax(ops.reshape(logits, (len(seg.member),)), seg.ptr)


def conv_forward(
    layer: int,
    graph: BipartiteGraph,
    prev: Tensor,
    weights: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig
) -> Tensor:
    """``R^l`` from ``R^{l-1}`` and the layer's segment weights."""
    seg = graph.segments()
    pooled = ops.segment_weighted_sum(weights, ops.gather_rows(prev, seg.member), seg.ptr)
    transformed = ops.affine(pooled, params[layer_param_names(layer)["weight"]])
    return ops.activate(transformed, config.activation, config.negative_slope)


def forward_all(
    params: dict[str, Tensor],
    graph: BipartiteGraph,
    config: ModelConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None
) -> RepresentationSets:
    """Run the embedding lookup and all ``K-1`` layers.

    Dropout with ``config.dropout`` is applied to ``R^0`` and to every layer
    output in train mode only.
    """
    mode = Mode(mode)
    training = mode is Mode.TRAIN
    embedding = params[EMBEDDING]
    if embedding.shape[0] != graph.num_entities:
        raise ValueError(
            f"embedding table has {embedding.shape[0]} rows but graph has {graph.num_entities} entities"
        )

    current = ops.dropout(embedding, config.dropout, rng, training)
    layers = [current]
    for layer in range(1, config.num_tasks):
        weights = attention_weights(layer, graph, current, params, config)
        current = conv_forward(layer, graph, current, weights, params, config)
        current = ops.dropout(current, config.dropout, rng, training)
        layers.append(current)
    return RepresentationSets(layers)


def forward(
    store: ParamStore,
    graph: BipartiteGraph,
    config: ModelConfig,
    mode: Mode = Mode.EVAL,
    tape: Optional[GradTape] = None,
    rng: Optional[np.random.Generator] = None
) -> RepresentationSets:
    """``forward_all`` over a ParamStore, watching parameters on ``tape`` if given."""
    params = store.watch(tape) if tape is not None else store.constants()
    return forward_all(params, graph, config, mode, rng)


def eval_embeddings(reps: RepresentationSets, layers: Optional[Sequence[int]] = None) -> np.ndarray:
    """Row-wise concatenation ``v^0 ‖ … ‖ v^{K-1}`` (optionally of selected layers)."""
    chosen = range(len(reps)) if layers is None else layers
    matrices = [reps[layer].value for layer in chosen]
    if not matrices:
        raise ValueError("eval_embeddings needs at least one representation set")
    return np.concatenate(matrices, axis=1)


def score(embeddings: np.ndarray, num_users: int, user: int, item: int) -> float:
    """Preference score ``u_eval · i_eval``."""
    num_items = embeddings.shape[0] - num_users
    if not 0 <= user < num_users:
        raise IndexError(f"user {user} out of range [0, {num_users})")
    if not 0 <= item < num_items:
        raise IndexError(f"item {item} out of range [0, {num_items})")
    return float(embeddings[user] @ embeddings[num_users + item])


class GraphRecommender:
    """A trained parameter store bound to its graph and model config."""

    def __init__(self, store: ParamStore, graph: BipartiteGraph, config: ModelConfig):
        expected = param_shapes(config, graph.num_entities)
        if store.shapes != expected:
            raise ValueError(f"parameter shapes {store.shapes} do not match config {expected}")
        self.store = store
        self.graph = graph
        self.config = config
        self._embeddings: Optional[np.ndarray] = None

    @property
    def num_users(self) -> int:
        return self.graph.num_users

    def representations(self) -> RepresentationSets:
        return forward(self.store, self.graph, self.config, Mode.EVAL)

    def embeddings(self, layers: Optional[Sequence[int]] = None) -> np.ndarray:
        """Eval-mode concatenated embeddings; the full concatenation is cached."""
        if layers is not None:
            return eval_embeddings(self.representations(), layers)
        if self._embeddings is None:
            self._embeddings = eval_embeddings(self.representations())
        return self._embeddings

    def score(self, user: int, item: int) -> float:
        return score(self.embeddings(), self.num_users, user, item)

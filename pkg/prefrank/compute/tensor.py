"""Tensors, the gradient tape and the differentiable primitives.

A :class:`Tensor` created by :meth:`GradTape.watch` is a named leaf. Every
primitive applied to a taped tensor appends a record holding its inputs and a
closure mapping the output gradient to input gradients. Records are appended
in execution order, so walking them backwards is a reverse topological order.
Tensors without a tape are constants and record nothing (evaluation mode).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from prefrank.config import Activation
from prefrank.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An ndarray bound (or not) to a gradient tape."""

    __slots__ = ("value", "tape", "name")

    def __init__(self, value: np.ndarray, tape: Optional["GradTape"] = None, name: Optional[str] = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        taped = " taped" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{label}{taped})"


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """Records one forward pass and replays it in reverse."""

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, name: str, value: np.ndarray) -> Tensor:
        """Register a named leaf whose gradient :meth:`backward` returns."""
        if name in self._leaves:
            raise TapeError(f"parameter '{name}' already watched on this tape")
        leaf = Tensor(value, tape=self, name=name)
        self._leaves[name] = leaf
        return leaf

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self._records.append(_Record(op, out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` for every watched leaf.

        Leaves the loss does not depend on receive zeros.

        Raises:
            TapeError: If nothing was recorded or ``loss`` is not a scalar
                produced on this tape.
        """
        if not self._records:
            raise TapeError("backward called before any forward pass was recorded")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for record in reversed(self._records):
            upstream = grads.pop(id(record.out), None)
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward(upstream)):
                if grad is None or tensor.tape is not self:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        return {
            name: grads.get(id(leaf), np.zeros_like(leaf.value))
            for name, leaf in self._leaves.items()
        }


def _tape_of(*tensors: Tensor) -> Optional[GradTape]:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, f"output of shape {value.shape}")
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def constant(value: np.ndarray) -> Tensor:
    return Tensor(np.asarray(value))


def _segment_ids(ptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))


def _check_segments(op: str, ptr: np.ndarray, length: int) -> None:
    if ptr[0] != 0 or ptr[-1] != length:
        raise ShapeError(op, (int(ptr[0]), int(ptr[-1])), (0, length))
    if np.any(np.diff(ptr) <= 0):
        raise ValueError(f"{op}: every segment must be non-empty")


# -- Structural primitives --------------------------------------------------

def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; gradients of repeated rows accumulate."""
    index = np.asarray(index, dtype=np.int64)
    if x.value.ndim != 2:
        raise ShapeError("gather_rows", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    rows = x.shape[0]

    def backward(g: np.ndarray):
        scatter = sp.csr_matrix(
            (np.ones(len(index), dtype=g.dtype), (index, np.arange(len(index)))),
            shape=(rows, len(index))
        )
        return (np.asarray(scatter @ g),)

    return _emit("gather_rows", x.value[index], (x,), backward)


def concat_cols(*parts: Tensor) -> Tensor:
    """Row-wise concatenation ``x‖y‖…`` along the feature axis."""
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.value.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols", parts[0].shape, p.shape)
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, cuts, axis=1))

    return _emit("concat_cols", np.concatenate([p.value for p in parts], axis=1), parts, backward)


def concat_pairs(x: Tensor, y: Tensor) -> Tensor:
    return concat_cols(x, y)


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w (+ b)``."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("affine bias", w.shape, b.shape)

    value = x.value @ w.value
    if b is not None:
        value = value + b.value

    def backward(g: np.ndarray):
        grads = [g @ w.value.T, x.value.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("affine", value, inputs, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(original),)

    return _emit("reshape", x.value.reshape(shape), (x,), backward)


# -- Segment primitives -----------------------------------------------------

def segment_softmax(logits: Tensor, ptr: np.ndarray) -> Tensor:
    """Softmax within each contiguous segment ``ptr[s]:ptr[s+1]`` of a vector."""
    if logits.value.ndim != 1:
        raise ShapeError("segment_softmax", logits.shape, (int(ptr[-1]),))
    _check_segments("segment_softmax", ptr, logits.shape[0])
    starts = ptr[:-1]
    seg = _segment_ids(ptr)

    shifted = logits.value - np.maximum.reduceat(logits.value, starts)[seg]
    exp = np.exp(shifted)
    y = exp / np.add.reduceat(exp, starts)[seg]

    def backward(g: np.ndarray):
        inner = np.add.reduceat(g * y, starts)[seg]
        return (y * (g - inner),)

    return _emit("segment_softmax", y, (logits,), backward)


def segment_weighted_sum(weights: Tensor, values: Tensor, ptr: np.ndarray) -> Tensor:
    """``out[s] = Σ_{r in segment s} weights[r] * values[r]``, summed in index order."""
    if weights.value.ndim != 1 or values.value.ndim != 2 or weights.shape[0] != values.shape[0]:
        raise ShapeError("segment_weighted_sum", weights.shape, values.shape)
    _check_segments("segment_weighted_sum", ptr, values.shape[0])
    starts = ptr[:-1]
    seg = _segment_ids(ptr)

    out = np.add.reduceat(weights.value[:, None] * values.value, starts, axis=0)

    def backward(g: np.ndarray):
        spread = g[seg]
        return (
            np.sum(values.value * spread, axis=1),
            weights.value[:, None] * spread,
        )

    return _emit("segment_weighted_sum", out, (weights, values), backward)


# -- Elementwise primitives -------------------------------------------------

def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    slope = np.where(x.value > 0, 1.0, negative_slope).astype(x.dtype)

    def backward(g: np.ndarray):
        return (g * slope,)

    return _emit("leaky_relu", x.value * slope, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)

    def backward(g: np.ndarray):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def backward(g: np.ndarray):
        return (g * (1.0 - y * y),)

    return _emit("tanh", y, (x,), backward)


def activate(x: Tensor, kind: Activation, negative_slope: float = 0.2) -> Tensor:
    """Apply the configured activation σ."""
    kind = Activation(kind)
    if kind is Activation.LEAKY_RELU:
        return leaky_relu(x, negative_slope)
    if kind is Activation.RELU:
        return relu(x)
    if kind is Activation.SIGMOID:
        return sigmoid(x)
    if kind is Activation.TANH:
        return tanh(x)
    return x


def log_sigmoid(x: Tensor) -> Tensor:
    """``ln σ(x)`` evaluated without overflow."""
    value = -np.logaddexp(0.0, -x.value)

    def backward(g: np.ndarray):
        return (g * expit(-x.value),)

    return _emit("log_sigmoid", value, (x,), backward)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, ``1/(1-p)`` otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Identity in eval mode or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = dropout_mask(x.shape, p, rng, dtype=x.dtype)

    def backward(g: np.ndarray):
        return (g * mask,)

    return _emit("dropout", x.value * mask, (x,), backward)


def dot_rows(x: Tensor, y: Tensor) -> Tensor:
    """Per-row inner products of two equally shaped matrices."""
    if x.shape != y.shape or x.value.ndim != 2:
        raise ShapeError("dot_rows", x.shape, y.shape)

    def backward(g: np.ndarray):
        return (g[:, None] * y.value, g[:, None] * x.value)

    return _emit("dot_rows", np.sum(x.value * y.value, axis=1), (x, y), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError("add", x.shape, y.shape)

    def backward(g: np.ndarray):
        return (g, g)

    return _emit("add", x.value + y.value, (x, y), backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError("sub", x.shape, y.shape)

    def backward(g: np.ndarray):
        return (g, -g)

    return _emit("sub", x.value - y.value, (x, y), backward)


def scale(x: Tensor, factor: float) -> Tensor:

    def backward(g: np.ndarray):
        return (g * factor,)

    return _emit("scale", x.value * factor, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every entry as a 0-d tensor."""
    shape = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum_all", np.sum(x.value), (x,), backward)


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of equally shaped tensors."""
    if not terms:
        raise ValueError("mean_of needs at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(terms))

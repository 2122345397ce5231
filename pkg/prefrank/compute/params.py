"""Parameter storage, Xavier initialisation and the Adam update."""

import copy
import logging
import math
from typing import Iterable, Optional

import numpy as np

from prefrank.compute.tensor import GradTape, Tensor
from prefrank.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)


def xavier_init(
    shape: tuple[int, ...],
    seed: Optional[int] = None,
    dtype: np.dtype = np.float64,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Uniform samples in ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``.

    For a matrix ``(fan_in, fan_out)`` the fans are its two dimensions; a
    vector of length ``k`` uses ``fan_in = fan_out = k``.

    Raises:
        ValueError: For a 0-d shape or any zero-size dimension.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("xavier_init needs a shape with at least one dimension")
    if any(s <= 0 for s in shape):
        raise ValueError(f"xavier_init got zero-size shape {shape}")

    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = math.prod(shape[2:])
        fan_in, fan_out = shape[0] * receptive, shape[1] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))

    generator = rng if rng is not None else np.random.default_rng(seed)
    return generator.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable arrays plus their Adam moments and step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params: dict[str, np.ndarray] = {name: np.array(value) for name, value in params.items()}
        self.m: dict[str, np.ndarray] = {name: np.zeros_like(v) for name, v in self.params.items()}
        self.v: dict[str, np.ndarray] = {name: np.zeros_like(v) for name, v in self.params.items()}
        self.step: int = 0
        self.grads: dict[str, np.ndarray] = {}

    @classmethod
    def initialize(
        cls,
        shapes: dict[str, tuple[int, ...]],
        seed: int,
        dtype: np.dtype = np.float64
    ) -> "ParamStore":
        """Xavier-initialise every shape; parameter ``k`` draws from ``(seed, k)``."""
        return cls({
            name: xavier_init(shape, seed=None, dtype=dtype, rng=np.random.default_rng([seed, index]))
            for index, (name, shape) in enumerate(shapes.items())
        })

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: value.shape for name, value in self.params.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    def watch(self, tape: GradTape) -> dict[str, Tensor]:
        """Bind every parameter to ``tape`` as a named leaf."""
        return {name: tape.watch(name, value) for name, value in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        """Untaped views for evaluation-mode forwards."""
        return {name: Tensor(value, name=name) for name, value in self.params.items()}

    def set_gradients(self, grads: dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter '{name}'")
            if grad.shape != self.params[name].shape:
                raise ShapeError(f"gradient of {name}", self.params[name].shape, grad.shape)
        self.grads = dict(grads)

    def zero_grad(self) -> None:
        self.grads = {}

    def equals(self, other: "ParamStore") -> bool:
        """Bit-identical parameters, moments and step."""
        if self.names != other.names or self.step != other.step:
            return False
        return all(
            np.array_equal(self.params[n], other.params[n])
            and np.array_equal(self.m[n], other.m[n])
            and np.array_equal(self.v[n], other.v[n])
            for n in self.names
        )


def adam_step(
    store: ParamStore,
    gradients: Optional[dict[str, np.ndarray]] = None,
    lr: float = 1e-4,
    l2_coeff: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2_names: Optional[Iterable[str]] = None
) -> None:
    """Apply one bias-corrected Adam update in place.

    The update direction for ``θ`` uses ``g + l2_coeff * θ``. Parameters
    without a gradient entry are treated as having a zero gradient.

    Args:
        store: Parameters and moments to update.
        gradients: Gradients keyed by parameter name; defaults to ``store.grads``.
        lr: Learning rate.
        l2_coeff: L2 regularisation coefficient.
        beta1: First moment decay.
        beta2: Second moment decay.
        eps: Denominator offset.
        l2_names: Parameters regularised by ``l2_coeff``; all when ``None``.

    Raises:
        TapeError: If no gradients are available.
        NonFiniteError: If any gradient contains NaN or Inf.
    """
    grads = gradients if gradients is not None else store.grads
    if not grads:
        raise TapeError("adam_step called without gradients; run backward first")

    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
            logger.error(f"Gradient of '{name}' has {bad} non-finite entries")
            raise NonFiniteError(f"gradient of {name}", f"{bad} non-finite entries")

    regularised = set(store.names if l2_names is None else l2_names)
    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    for name, theta in store.params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(theta)
        if l2_coeff and name in regularised:
            grad = grad + l2_coeff * theta
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)

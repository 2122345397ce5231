"""Differentiable numerical core: tensors, tape, parameters, Adam, checkpoints."""

from prefrank.compute.params import ParamStore, adam_step, xavier_init
from prefrank.compute.tensor import GradTape, Tensor

__all__ = ["GradTape", "ParamStore", "Tensor", "adam_step", "xavier_init"]

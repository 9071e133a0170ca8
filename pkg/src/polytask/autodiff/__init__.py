"""Reverse-mode automatic differentiation over numpy arrays."""
from . import ops
from .tensor import Tape, Tensor, as_tensor, backward, record_op

__all__ = ["Tape", "Tensor", "as_tensor", "backward", "record_op", "ops"]

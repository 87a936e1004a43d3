"""Minimal tape-based reverse-mode differentiation over float64 arrays."""

from . import ops
from .check import FiniteDifferenceError, finite_difference_check
from .graph import DomainError, Graph, Operation, ShapeError, Tensor, backward
from .ops import logsumexp

__all__ = [
    "DomainError",
    "FiniteDifferenceError",
    "Graph",
    "Operation",
    "ShapeError",
    "Tensor",
    "backward",
    "finite_difference_check",
    "logsumexp",
    "ops",
]

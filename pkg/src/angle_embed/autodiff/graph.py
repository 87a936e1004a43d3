"""Tape and tensor types for reverse-mode differentiation.

A :class:`Graph` owns every tensor created on it and records each primitive
as an :class:`Operation` in execution order. Because an operation can only
consume tensors that already exist, the tape is topologically sorted by
construction, and :func:`backward` simply walks it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's shape rule."""


class DomainError(ValueError):
    """An input lies outside an operation's domain (e.g. ``sqrt`` of a negative)."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message if index is None else f"{message} at index {index}")
        self.index = index


class Tensor:
    """Dense float64 array registered as a node of one graph."""

    __slots__ = ("graph", "node_id", "values", "requires_grad", "grad")

    def __init__(self, graph: Graph, node_id: int, values: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.node_id = node_id
        self.values = values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(id={self.node_id}, shape={self.shape}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Operation:
    kind: str
    inputs: tuple[int, ...]
    output: int
    saved: dict = field(default_factory=dict)
    backward_fn: BackwardFn | None = None


class Graph:
    """Ordered record of primitive applications.

    Tensors are confined to the graph that created them; mixing tensors of
    two graphs in one operation raises :class:`ValueError`.
    """

    def __init__(self) -> None:
        self.tensors: list[Tensor] = []
        self.operations: list[Operation] = []

    def _new(self, values: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(self, len(self.tensors), values, requires_grad)
        self.tensors.append(t)
        return t

    def param(self, values) -> Tensor:
        """Leaf tensor that receives a gradient."""
        return self._new(_as_values(values), True)

    def constant(self, values) -> Tensor:
        """Leaf tensor excluded from differentiation."""
        return self._new(_as_values(values), False)

    def record(
        self,
        kind: str,
        inputs: Sequence[Tensor],
        values: np.ndarray,
        backward_fn: BackwardFn,
        **saved,
    ) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{kind}: input tensor {t.node_id} belongs to another graph")
        requires_grad = any(t.requires_grad for t in inputs)
        out = self._new(values, requires_grad)
        self.operations.append(
            Operation(
                kind=kind,
                inputs=tuple(t.node_id for t in inputs),
                output=out.node_id,
                saved=saved,
                backward_fn=backward_fn if requires_grad else None,
            )
        )
        return out


def _as_values(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if any(dim <= 0 for dim in arr.shape):
        raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
    return arr


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor of ``root``'s graph.

    ``root`` must hold exactly one element. Gradients from an earlier call are
    discarded, so calling twice yields the same result.
    """
    if root.values.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    graph = root.graph
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    for op in reversed(graph.operations):
        if op.output > root.node_id or op.backward_fn is None:
            continue
        g_out = grads.get(op.output)
        if g_out is None:
            continue
        in_grads = op.backward_fn(g_out)
        for node_id, g in zip(op.inputs, in_grads):
            if g is None or not graph.tensors[node_id].requires_grad:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + g
            else:
                grads[node_id] = g
    for t in graph.tensors:
        if t.requires_grad:
            g = grads.get(t.node_id)
            t.grad = np.zeros_like(t.values) if g is None else np.asarray(g).reshape(t.shape)

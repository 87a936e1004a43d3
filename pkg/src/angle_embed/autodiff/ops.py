"""Differentiable primitives.

Every function here evaluates its forward value eagerly with numpy and
registers a backward rule on the owning graph. Shapes never broadcast
implicitly: binary elementwise operations accept equal shapes or a
single-element operand (a Python number or a size-1 tensor). Anything else
goes through :func:`broadcast_to` so the expansion is visible in the tape.
"""

from __future__ import annotations

from numbers import Real
from typing import Sequence

import numpy as np

from .. import kernels
from .graph import DomainError, Graph, ShapeError, Tensor

Operand = Tensor | float


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _vals(x: Operand) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    if isinstance(x, Real):
        return np.float64(x)
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _first_index(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def _binary_shapes(kind: str, a: Operand, b: Operand) -> None:
    sa, sb = np.shape(_vals(a)), np.shape(_vals(b))
    if sa == sb:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


def _inputs(*xs) -> list[Tensor]:
    return [x for x in xs if isinstance(x, Tensor)]


def _binary(kind: str, a: Operand, b: Operand, values: np.ndarray, da, db) -> Tensor:
    """Record a binary op. ``da``/``db`` map the upstream grad to each operand's grad."""
    graph = _graph_of(a, b)
    sa, sb = np.shape(_vals(a)), np.shape(_vals(b))
    a_is_t, b_is_t = isinstance(a, Tensor), isinstance(b, Tensor)

    def backward_fn(g):
        out = []
        if a_is_t:
            out.append(_reduce_to(da(g), sa))
        if b_is_t:
            out.append(_reduce_to(db(g), sb))
        return out

    return graph.record(kind, _inputs(a, b), np.asarray(values, dtype=np.float64), backward_fn)


def add(a: Operand, b: Operand) -> Tensor:
    _binary_shapes("add", a, b)
    return _binary("add", a, b, _vals(a) + _vals(b), lambda g: g, lambda g: g)


def sub(a: Operand, b: Operand) -> Tensor:
    _binary_shapes("sub", a, b)
    return _binary("sub", a, b, _vals(a) - _vals(b), lambda g: g, lambda g: -g)


def mul(a: Operand, b: Operand) -> Tensor:
    _binary_shapes("mul", a, b)
    va, vb = _vals(a), _vals(b)
    return _binary("mul", a, b, va * vb, lambda g: g * vb, lambda g: g * va)


def div(a: Operand, b: Operand) -> Tensor:
    _binary_shapes("div", a, b)
    va, vb = _vals(a), _vals(b)
    zero = np.asarray(vb) == 0.0
    if zero.any():
        raise DomainError("div: division by zero", _first_index(np.atleast_1d(zero)))
    return _binary("div", a, b, va / vb, lambda g: g / vb, lambda g: -g * va / (vb * vb))


def neg(x: Tensor) -> Tensor:
    return x.graph.record("neg", [x], -x.values, lambda g: (-g,))


def _unary(kind: str, x: Tensor, values: np.ndarray, deriv: np.ndarray) -> Tensor:
    return x.graph.record(kind, [x], values, lambda g: (g * deriv,))


def sqrt(x: Tensor) -> Tensor:
    if (x.values < 0).any():
        raise DomainError("sqrt: negative input", _first_index(np.atleast_1d(x.values < 0)))
    y = np.sqrt(x.values)
    graph = x.graph

    def backward_fn(g):
        with np.errstate(divide="raise"):
            return (g * 0.5 / y,)

    return graph.record("sqrt", [x], y, backward_fn)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _unary("abs", x, np.abs(x.values), np.sign(x.values))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _unary("exp", x, y, y)


def log(x: Tensor) -> Tensor:
    if (x.values <= 0).any():
        raise DomainError("log: non-positive input", _first_index(np.atleast_1d(x.values <= 0)))
    return _unary("log", x, np.log(x.values), 1.0 / x.values)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _unary("tanh", x, y, 1.0 - y * y)


def cos(x: Tensor) -> Tensor:
    return _unary("cos", x, np.cos(x.values), -np.sin(x.values))


def sin(x: Tensor) -> Tensor:
    return _unary("sin", x, np.sin(x.values), np.cos(x.values))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)
    d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return _unary("gelu", x, y, d)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        y = np.asarray(x.values.sum(keepdims=keepdims))

        def backward_fn(g):
            return (np.broadcast_to(np.asarray(g).reshape((1,) * len(shape) if shape else ()), shape),)

        return x.graph.record("sum", [x], y, backward_fn, axis=None)
    ax = _norm_axis(axis, x.values.ndim)
    y = x.values.sum(axis=ax, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return x.graph.record("sum", [x], np.asarray(y), backward_fn, axis=ax)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.values.ndim)]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def max(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties send the gradient to the first maximiser."""
    ax = _norm_axis(axis, x.values.ndim)
    idx = np.expand_dims(np.argmax(x.values, axis=ax), ax)
    y = np.take_along_axis(x.values, idx, axis=ax)
    if not keepdims:
        y = np.squeeze(y, axis=ax)
    shape = x.shape

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g, axis=ax)
        return (out,)

    return x.graph.record("max", [x], np.asarray(y), backward_fn, axis=ax)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., n, k)``. ``b`` is either a ``(k, m)`` matrix shared by
    every leading index of ``a``, or ``(..., k, m)`` with leading dimensions
    identical to ``a``'s.
    """
    va, vb = a.values, b.values
    if va.ndim < 2 or vb.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {va.shape} and {vb.shape}")
    if va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {va.shape} @ {vb.shape}")
    shared = vb.ndim == 2
    if not shared and va.shape[:-2] != vb.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {va.shape} @ {vb.shape}")
    y = va @ vb

    def backward_fn(g):
        ga = g @ np.swapaxes(vb, -1, -2)
        if shared:
            gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(va, -1, -2) @ g
        return ga, gb

    return a.graph.record("matmul", [a, b], y, backward_fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape
    if not 0 <= start < stop <= shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] invalid for last dimension {shape[-1]}")

    def backward_fn(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return x.graph.record("slice", [x], x.values[..., start:stop].copy(), backward_fn)


def split_half(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split the last axis into equal first and second halves."""
    n = x.shape[-1] if x.shape else 0
    if n == 0 or n % 2:
        raise ShapeError(f"split_half needs an even last dimension, got shape {x.shape}")
    h = n // 2
    return slice_last(x, 0, h), slice_last(x, h, n)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ndim = xs[0].values.ndim
    ax = _norm_axis(axis, ndim)
    for t in xs[1:]:
        other = t.shape[:ax] + t.shape[ax + 1 :]
        if t.values.ndim != ndim or other != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {ax}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return np.split(g, cuts, axis=ax)

    y = np.concatenate([t.values for t in xs], axis=ax)
    return _graph_of(*xs).record("concat", list(xs), y, backward_fn, axis=ax)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows (first-axis entries) of ``x``; ``indices`` may have any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise ShapeError(f"take_rows: index {int(idx[bad].flat[0])} out of range for {n} rows")
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.graph.record("take_rows", [x], x.values[idx], backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.values.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from e
    return x.graph.record("reshape", [x], y, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.values.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.values.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return x.graph.record(
        "transpose", [x], np.transpose(x.values, axes), lambda g: (np.transpose(g, inverse),)
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule expansion; the gradient sums over expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        y = np.broadcast_to(x.values, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}") from e
    lead = len(shape) - len(src)
    expanded = tuple(i for i in range(len(shape)) if i < lead or src[i - lead] == 1 and shape[i] != 1)

    def backward_fn(g):
        g = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (g.reshape(src),)

    return x.graph.record("broadcast_to", [x], y, backward_fn)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. Where ``mask`` is False the probability is exactly 0."""
    ax = _norm_axis(axis, x.values.ndim)
    v = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mask.any(axis=ax).all():
            raise ShapeError("softmax: a slice along the axis is fully masked")
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=ax, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return x.graph.record("softmax", [x], p, backward_fn, axis=ax)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """``log(sum(exp(x)))`` along ``axis`` with the running max subtracted first."""
    ax = _norm_axis(axis, x.values.ndim)
    if x.shape[ax] == 0:
        raise ShapeError("logsumexp over an empty axis")
    shift = x.graph.constant(x.values.max(axis=ax, keepdims=True))
    shifted = sub(x, broadcast_to(shift, x.shape))
    out = add(log(sum(exp(shifted), axis=ax, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.values, axis=ax).shape)
    return out


def rank_loss(scores: Tensor, labels, tau: float) -> Tensor:
    """Pairwise ranking loss ``log(1 + sum exp((s_low - s_high) / tau))``.

    The sum runs over every ordered pair of entries whose labels differ, with
    the higher-labelled entry as ``s_high``. The value and its gradient come
    from the compiled kernel when available.
    """
    s = scores.values
    lab = np.asarray(labels, dtype=np.float64)
    if s.ndim != 1 or lab.shape != s.shape:
        raise ShapeError(f"rank_loss: scores {s.shape} and labels {lab.shape} must be equal 1-d")
    if not tau > 0:
        raise DomainError(f"rank_loss: temperature must be positive, got {tau}")
    loss, grad = kernels.rank_loss(np.ascontiguousarray(s), np.ascontiguousarray(lab), float(tau))
    return scores.graph.record(
        "rank_loss", [scores], np.asarray(loss), lambda g: (g * grad,), tau=tau
    )

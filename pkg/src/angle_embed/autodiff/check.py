"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .graph import Graph, Tensor, backward


class FiniteDifferenceError(RuntimeError):
    """The checked function failed at a perturbed coordinate."""

    def __init__(self, name: str | None, coordinate: tuple[int, ...], cause: Exception):
        where = coordinate if name is None else f"{name}{list(coordinate)}"
        super().__init__(f"function failed when perturbing coordinate {where}: {cause}")
        self.name = name
        self.coordinate = coordinate


def _evaluate(f, inputs: dict[str, np.ndarray], single: bool) -> float:
    graph = Graph()
    leaves = {k: graph.constant(v) for k, v in inputs.items()}
    out = f(leaves[None]) if single else f(leaves)
    return out.item()


def finite_difference_check(
    f: Callable[..., Tensor],
    x: np.ndarray | Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` receives a fresh leaf tensor (or a dict of them when ``x`` is a
    mapping) and must return a single-element tensor built on that leaf's
    graph. The error of each coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    single = not isinstance(x, Mapping)
    inputs = {None: np.array(x, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in x.items()
    }

    graph = Graph()
    leaves = {k: graph.param(v) for k, v in inputs.items()}
    root = f(leaves[None]) if single else f(leaves)
    backward(root)
    analytic = {k: t.grad for k, t in leaves.items()}

    worst = 0.0
    for name, base in inputs.items():
        for coord in np.ndindex(base.shape):
            orig = base[coord]
            try:
                base[coord] = orig + step
                up = _evaluate(f, inputs, single)
                base[coord] = orig - step
                down = _evaluate(f, inputs, single)
            except Exception as e:  # noqa: BLE001 - re-raised with the coordinate
                raise FiniteDifferenceError(name, coord, e) from e
            finally:
                base[coord] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[name][coord])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst

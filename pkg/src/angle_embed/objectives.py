"""Cosine ranking, in-batch negative and complex-angle objectives.

All losses consume a :class:`ScoredBatch` whose ``representations`` tensor
lives on a caller-owned graph, so the result can be backpropagated into
whatever produced the representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import DomainError, Graph, ShapeError, Tensor, backward
from .autodiff import ops

# keeps sqrt differentiable near zero norms
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau_cos: float = 0.05
    tau_ibn: float = 0.05
    tau_angle: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        for name in ("tau_cos", "tau_ibn", "tau_angle"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        weights = (self.w1, self.w2, self.w3)
        if any(w < 0 for w in weights):
            raise ValueError(f"loss weights must be non-negative, got {weights}")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one of w1, w2, w3 must be positive")


@dataclass
class ScoredBatch:
    """Encoded rows plus the pair structure the objectives need.

    ``pair_index`` is ``(P, 2)``: row indices of each labelled pair.
    ``positive_index`` is ``(M, 2)``: anchor row and its positive row.
    ``duplicate_groups`` gives every row a group id shared by rows whose
    source texts are identical.
    """

    representations: Tensor
    labels: np.ndarray
    pair_index: np.ndarray
    positive_index: np.ndarray
    duplicate_groups: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.pair_index = np.asarray(self.pair_index, dtype=np.int64).reshape(-1, 2)
        self.positive_index = np.asarray(self.positive_index, dtype=np.int64).reshape(-1, 2)
        self.duplicate_groups = np.asarray(self.duplicate_groups, dtype=np.int64)
        rows = self.representations.shape[0]
        if self.representations.values.ndim != 2:
            raise ShapeError(f"representations must be (N, d), got {self.representations.shape}")
        if self.labels.shape != (self.pair_index.shape[0],):
            raise ShapeError(
                f"{self.labels.shape[0]} labels for {self.pair_index.shape[0]} pairs"
            )
        for name in ("pair_index", "positive_index"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= rows):
                raise ShapeError(f"{name} references a row outside 0..{rows - 1}")
        if self.duplicate_groups.shape != (rows,):
            raise ShapeError(f"duplicate_groups must assign a group to each of {rows} rows")


def _row_norms(x: Tensor) -> Tensor:
    return ops.sqrt(ops.add(ops.sum(ops.mul(x, x), axis=-1), NORM_FLOOR))


def _check_nonzero(x: Tensor, what: str, rows=None) -> None:
    zero = ~np.any(x.values != 0.0, axis=-1)
    if np.any(zero):
        i = int(np.flatnonzero(np.atleast_1d(zero))[0])
        if rows is not None:
            i = int(np.asarray(rows).ravel()[i])
        raise DomainError(f"{what}: zero-norm representation in row {i}")


def row_cosines(x: Tensor, y: Tensor) -> Tensor:
    """Cosine similarity of matching rows of two ``(P, d)`` tensors."""
    if x.shape != y.shape:
        raise ShapeError(f"cosine: shapes {x.shape} and {y.shape} differ")
    _check_nonzero(x, "cosine")
    _check_nonzero(y, "cosine")
    dots = ops.sum(ops.mul(x, y), axis=-1)
    return ops.div(dots, ops.mul(_row_norms(x), _row_norms(y)))


def cosine_similarity(x: Tensor, y: Tensor) -> Tensor:
    """Cosine similarity of two 1-d tensors, as a shape-() tensor."""
    if x.values.ndim != 1:
        raise ShapeError(f"cosine_similarity expects 1-d rows, got {x.shape}")
    c = row_cosines(ops.reshape(x, (1, -1)), ops.reshape(y, (1, -1)))
    return ops.reshape(c, ())


def row_angle_differences(x: Tensor, y: Tensor) -> Tensor:
    """Normalised complex angle difference of matching rows.

    Each row is read as ``k`` complex numbers: its first half is the real
    part and its second half the imaginary part. For ``z = a + bi`` and
    ``w = c + di`` the quotient ``z / w`` up to the positive factor
    ``|w|^2`` is ``(ac + bd) + (bc - ad)i``; summing real and imaginary
    components over all ``k`` coordinates and dividing by ``|z| |w|``
    (vector magnitudes) gives a scalar whose absolute value is returned.
    """
    if x.shape != y.shape:
        raise ShapeError(f"angle difference: shapes {x.shape} and {y.shape} differ")
    if x.shape[-1] % 2:
        raise ShapeError(f"angle difference needs an even dimension, got {x.shape[-1]}")
    _check_nonzero(x, "angle difference")
    _check_nonzero(y, "angle difference")
    a, b = ops.split_half(x)
    c, d = ops.split_half(y)
    re = ops.add(ops.mul(a, c), ops.mul(b, d))
    im = ops.sub(ops.mul(b, c), ops.mul(a, d))
    total = ops.sum(ops.concat([re, im], axis=-1), axis=-1)
    sq_z = ops.sum(ops.mul(x, x), axis=-1)
    sq_w = ops.sum(ops.mul(y, y), axis=-1)
    magnitude = ops.sqrt(ops.add(ops.mul(sq_z, sq_w), NORM_FLOOR))
    return ops.abs(ops.div(total, magnitude))


def angle_difference(x: Tensor, y: Tensor) -> Tensor:
    """Angle difference of two 1-d tensors, as a shape-() tensor."""
    if x.values.ndim != 1:
        raise ShapeError(f"angle_difference expects 1-d rows, got {x.shape}")
    v = row_angle_differences(ops.reshape(x, (1, -1)), ops.reshape(y, (1, -1)))
    return ops.reshape(v, ())


def pairwise_rank_loss(scores: Tensor, labels, tau: float) -> Tensor:
    """``log(1 + sum exp((score_mn - score_ij) / tau))`` over ``label_ij > label_mn``.

    Higher scores mean more similar. Equal labels contribute nothing, so a
    batch whose labels are all equal yields exactly 0.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if scores.values.ndim != 1 or labels.shape != scores.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    return ops.rank_loss(scores, labels, tau)


def _pair_rows(batch: ScoredBatch) -> tuple[Tensor, Tensor]:
    if batch.pair_index.shape[0] < 1:
        raise ValueError("batch has no labelled pairs")
    x = batch.representations
    return ops.take_rows(x, batch.pair_index[:, 0]), ops.take_rows(x, batch.pair_index[:, 1])


def cosine_objective(batch: ScoredBatch, cfg: LossConfig) -> Tensor:
    left, right = _pair_rows(batch)
    return pairwise_rank_loss(row_cosines(left, right), batch.labels, cfg.tau_cos)


def angle_objective(batch: ScoredBatch, cfg: LossConfig) -> Tensor:
    left, right = _pair_rows(batch)
    # smaller angle difference means more similar, so rank on its negation
    scores = ops.neg(row_angle_differences(left, right))
    return pairwise_rank_loss(scores, batch.labels, cfg.tau_angle)


def ibn_mask(batch: ScoredBatch) -> np.ndarray:
    """``mask[i, j]`` is True when positive ``j`` stays in anchor ``i``'s denominator.

    Positives textually identical to anchor ``i``'s own positive are
    dropped (other than ``j == i``), since they are not real negatives.
    """
    groups = batch.duplicate_groups[batch.positive_index[:, 1]]
    mask = groups[:, None] != groups[None, :]
    np.fill_diagonal(mask, True)
    return mask


def ibn_objective(batch: ScoredBatch, cfg: LossConfig, detect_duplicates: bool = True) -> Tensor:
    """In-batch negative softmax loss, summed over anchors."""
    if batch.positive_index.shape[0] < 1:
        raise ValueError("ibn objective needs at least one anchor with a positive")
    x = batch.representations
    anchors = ops.take_rows(x, batch.positive_index[:, 0])
    positives = ops.take_rows(x, batch.positive_index[:, 1])
    _check_nonzero(anchors, "ibn", batch.positive_index[:, 0])
    _check_nonzero(positives, "ibn", batch.positive_index[:, 1])
    m = anchors.shape[0]

    def unit(t: Tensor) -> Tensor:
        return ops.div(t, ops.broadcast_to(ops.reshape(_row_norms(t), (m, 1)), t.shape))

    logits = ops.mul(ops.matmul(unit(anchors), ops.transpose(unit(positives), (1, 0))), 1.0 / cfg.tau_ibn)
    if detect_duplicates:
        mask = ibn_mask(batch)
    else:
        mask = np.ones((m, m), dtype=bool)
    if not mask.all():
        # exp(-1e30 - max) underflows to exactly 0
        logits = ops.add(logits, x.graph.constant(np.where(mask, 0.0, -1e30)))
    diag = ops.sum(ops.mul(logits, x.graph.constant(np.eye(m))), axis=-1)
    return ops.sum(ops.sub(ops.logsumexp(logits, axis=-1), diag))


def combined_objective(batch: ScoredBatch, cfg: LossConfig) -> Tensor:
    """``w1 * L_cos + w2 * L_ibn + w3 * L_angle``; zero-weight terms are skipped."""
    terms = []
    if cfg.w1 > 0:
        terms.append(ops.mul(cosine_objective(batch, cfg), cfg.w1))
    if cfg.w2 > 0:
        terms.append(ops.mul(ibn_objective(batch, cfg), cfg.w2))
    if cfg.w3 > 0:
        terms.append(ops.mul(angle_objective(batch, cfg), cfg.w3))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


class Probe(NamedTuple):
    grad: float
    at_kink: bool


def saturation_gradient_probe(theta: float, objective: str = "cos") -> Probe:
    """``|d score / d theta|`` for the pair ``(1, 0)``, ``(cos theta, sin theta)``.

    ``objective`` is ``"cos"`` (cosine similarity) or ``"angle"`` (angle
    difference). ``at_kink`` flags the zero subgradient returned where the
    angle difference crosses zero.
    """
    if objective not in ("cos", "angle"):
        raise ValueError(f"objective must be 'cos' or 'angle', got {objective!r}")
    graph = Graph()
    t = graph.param(np.array([theta], dtype=np.float64))
    x = graph.constant(np.array([1.0, 0.0]))
    y = ops.concat([ops.cos(t), ops.sin(t)])
    at_kink = False
    if objective == "cos":
        score = cosine_similarity(x, y)
    else:
        score = angle_difference(x, y)
        at_kink = score.item() == 0.0
    backward(score)
    return Probe(grad=math.fabs(float(t.grad[0])), at_kink=at_kink)

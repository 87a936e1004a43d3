"""Rank correlation, STS reports, similarity densities and exact retrieval."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .data import LabeledPair
from .encoder import EncoderConfig, ModelParams, embed_texts
from .objectives import saturation_gradient_probe


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined because one input is constant."""


def average_ranks(x) -> np.ndarray:
    return kernels.average_ranks(np.ascontiguousarray(x, dtype=np.float64))


def spearman(x, y) -> float:
    """Spearman's rho: Pearson correlation of tie-averaged ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"spearman needs equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("spearman needs at least two observations")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sx, sy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("spearman is undefined for a constant input")
    rho = float(np.dot(dx, dy)) / math.sqrt(sx * sy)
    return min(1.0, max(-1.0, rho))


Scorer = Callable[[Sequence[LabeledPair]], np.ndarray]


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(_unit_rows(a) * _unit_rows(b), axis=-1)


def encoder_scorer(params: ModelParams, cfg: EncoderConfig) -> Scorer:
    """Scorer returning the cosine similarity of each pair's embeddings."""

    def score(pairs: Sequence[LabeledPair]) -> np.ndarray:
        left = embed_texts([p.text1 for p in pairs], params, cfg)
        right = embed_texts([p.text2 for p in pairs], params, cfg)
        return cosine_scores(left, right)

    return score


@dataclass
class Histogram:
    """Per-label-group counts of similarity values over uniform bins."""

    edges: np.ndarray
    counts: np.ndarray  # (groups, bins)

    def rows(self) -> list[dict]:
        out = []
        for g in range(self.counts.shape[0]):
            for b in range(self.counts.shape[1]):
                out.append(
                    {"group": g, "bin_lo": float(self.edges[b]), "bin_hi": float(self.edges[b + 1]), "count": int(self.counts[g, b])}
                )
        return out

    def write_csv(self, path) -> None:
        _write_csv(path, ["group", "bin_lo", "bin_hi", "count"], self.rows())


@dataclass
class EvalReport:
    subsets: dict[str, tuple[int, float]]
    all_spearman_x100: float
    n_pairs: int
    histogram: Histogram | None = None
    retrieval_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = [{"subset": k, "n_pairs": n, "spearman_x100": s} for k, (n, s) in self.subsets.items()]
        rows.append({"subset": "all", "n_pairs": self.n_pairs, "spearman_x100": self.all_spearman_x100})
        return rows

    def write_csv(self, path) -> None:
        _write_csv(path, ["subset", "n_pairs", "spearman_x100"], self.rows())


def evaluate_sts(
    scorer: Scorer,
    datasets: Mapping[str, Sequence[LabeledPair]],
    bins: int = 50,
    label_groups: int = 6,
    label_range: tuple[float, float] = (0.0, 1.0),
) -> EvalReport:
    """Spearman x100 per subset and over all subsets concatenated.

    ``scorer`` maps a sequence of pairs to their predicted similarities.
    """
    if not datasets or any(len(v) == 0 for v in datasets.values()):
        raise ValueError("every evaluation subset must contain pairs")
    subsets = {}
    all_gold, all_pred, all_pairs = [], [], []
    for name, pairs in datasets.items():
        pred = np.asarray(scorer(pairs), dtype=np.float64)
        gold = np.array([p.label for p in pairs])
        subsets[name] = (len(pairs), 100.0 * spearman(gold, pred))
        all_gold.append(gold)
        all_pred.append(pred)
        all_pairs.extend(pairs)
    gold, pred = np.concatenate(all_gold), np.concatenate(all_pred)
    hist = density_histogram(all_pairs, pred, bins, label_groups, label_range)
    return EvalReport(subsets, 100.0 * spearman(gold, pred), len(gold), hist)


def label_group(label: float, groups: int, label_range: tuple[float, float]) -> int:
    lo, hi = label_range
    g = int(math.floor((label - lo) / (hi - lo) * groups))
    return min(max(g, 0), groups - 1)


def density_histogram(
    pairs: Sequence[LabeledPair],
    similarities,
    bins: int = 50,
    label_groups: int = 6,
    label_range: tuple[float, float] = (0.0, 1.0),
) -> Histogram:
    """Count similarities per gold-label group over ``bins`` uniform bins on [-1, 1].

    A value on an interior edge falls into the higher bin; 1.0 lands in the
    last bin. Labels are grouped uniformly across ``label_range``.
    """
    if bins < 1 or label_groups < 1:
        raise ValueError("bins and label_groups must be at least 1")
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.shape != (len(pairs),):
        raise ValueError(f"{sims.size} similarities for {len(pairs)} pairs")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts = np.zeros((label_groups, bins), dtype=np.int64)
    idx = np.searchsorted(edges, np.clip(sims, -1.0, 1.0), side="right") - 1
    idx = np.minimum(idx, bins - 1)
    for p, b in zip(pairs, idx):
        counts[label_group(p.label, label_groups, label_range), b] += 1
    return Histogram(edges, counts)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def retrieve_topk(query, corpus, k: int) -> np.ndarray:
    """Indices of the ``k`` corpus rows most cosine-similar to ``query``.

    Exact scan; equal similarities keep the lower index first.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a non-empty (n, d) array")
    if not 1 <= k <= corpus.shape[0]:
        raise ValueError(f"k={k} must lie in 1..{corpus.shape[0]}")
    sims = _unit_rows(corpus) @ _unit_rows(np.asarray(query, dtype=np.float64))
    return np.argsort(-sims, kind="stable")[:k]


def strict_accuracy(references: Sequence[Sequence], retrieved: Sequence[Sequence]) -> float:
    """Fraction of groups whose retrieved set equals the reference set exactly."""
    if len(references) != len(retrieved):
        raise ValueError(f"{len(references)} reference groups but {len(retrieved)} retrieved")
    if not references:
        raise ValueError("no groups to score")
    hits = 0
    for ref, got in zip(references, retrieved):
        if len(got) != len(ref):
            raise ValueError(f"retrieved {len(got)} items for a group of {len(ref)}")
        hits += set(ref) == set(got)
    return hits / len(references)


def saturation_report(thetas) -> list[dict]:
    """``|d cos/d theta|`` and ``|d angle/d theta|`` for each theta in (0, pi)."""
    rows = []
    for theta in sorted(float(t) for t in thetas):
        if not 0.0 < theta < math.pi:
            raise ValueError(f"theta {theta} outside the open interval (0, pi)")
        rows.append(
            {
                "theta": theta,
                "grad_cos": saturation_gradient_probe(theta, "cos").grad,
                "grad_angle": saturation_gradient_probe(theta, "angle").grad,
            }
        )
    return rows


def _write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows(rows)


def write_rows(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    _write_csv(path, list(rows[0].keys()), rows)

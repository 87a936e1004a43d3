"""Pure numpy implementations of the hot kernels.

These are the reference fallback for :mod:`angle_embed._kernels` and must
agree with it to rounding.
"""

import numpy as np


def rank_loss(scores, labels, tau):
    """Return ``(loss, dloss/dscores)`` for the pairwise ranking loss."""
    n = scores.shape[0]
    # qualifying[i, j]: entry i is labelled strictly higher than entry j
    qualifying = labels[:, None] > labels[None, :]
    if not qualifying.any():
        return 0.0, np.zeros(n)
    terms = (scores[None, :] - scores[:, None]) / tau
    m = max(0.0, float(terms[qualifying].max()))
    w = np.where(qualifying, np.exp(terms - m), 0.0)
    z = np.exp(-m) + w.sum()
    loss = m + np.log(z)
    w /= z * tau
    grad = w.sum(axis=0) - w.sum(axis=1)
    return float(loss), grad


def average_ranks(x):
    """1-based ranks with ties replaced by the mean of the ranks they span."""
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks

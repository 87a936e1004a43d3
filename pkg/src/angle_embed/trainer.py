"""Batching, AdamW optimisation and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, backward
from .checkpoint import Checkpoint
from .data import LabeledPair
from .encoder import EncoderConfig, ModelParams, encode_batch, init_params, pool_batch, tokenize
from .objectives import LossConfig, ScoredBatch, combined_objective

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    shuffle: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass
class PairBatch:
    """Texts of one batch laid out as rows ``2p`` (text1) and ``2p + 1`` (text2)."""

    texts: list[str]
    labels: np.ndarray
    pair_index: np.ndarray
    positive_index: np.ndarray
    duplicate_groups: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[LabeledPair]) -> PairBatch:
        texts = [t for p in pairs for t in (p.text1, p.text2)]
        n = len(pairs)
        pair_index = np.arange(2 * n, dtype=np.int64).reshape(n, 2)
        labels = np.array([p.label for p in pairs], dtype=np.float64)
        positive_index = pair_index[labels >= 1.0]
        ids: dict[str, int] = {}
        groups = np.array([ids.setdefault(normalize_text(t), len(ids)) for t in texts], dtype=np.int64)
        return cls(texts, labels, pair_index, positive_index, groups)

    def __len__(self) -> int:
        return len(self.labels)

    def score(self, representations) -> ScoredBatch:
        return ScoredBatch(
            representations, self.labels, self.pair_index, self.positive_index, self.duplicate_groups
        )


def make_batches(pairs: Sequence[LabeledPair], cfg: TrainConfig, epoch: int = 0) -> list[PairBatch]:
    """Split ``pairs`` into batches, shuffled by ``(seed, epoch)`` when enabled."""
    if not pairs:
        raise ValueError("no pairs to batch")
    order = np.arange(len(pairs))
    if cfg.shuffle:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
    return [
        PairBatch.from_pairs([pairs[i] for i in order[s : s + cfg.batch_size]])
        for s in range(0, len(pairs), cfg.batch_size)
    ]


@lru_cache(maxsize=200_000)
def _cached_tokens(text: str, vocab_size: int, max_len: int) -> tuple[int, ...]:
    return tuple(tokenize(text, EncoderConfig(vocab_size=vocab_size, max_len=max_len, dim=2, n_heads=1)))


def batch_loss(batch: PairBatch, graph: Graph, p: dict, enc: EncoderConfig, loss_cfg: LossConfig):
    tokens = [_cached_tokens(t, enc.vocab_size, enc.max_len) for t in batch.texts]
    states, lengths = encode_batch(graph, tokens, p, enc)
    reps = pool_batch(states, lengths, enc.pooling)
    scored = batch.score(reps)
    if loss_cfg.w2 > 0 and len(batch.positive_index) == 0:
        # no anchors in this batch: drop the in-batch term rather than fail
        if loss_cfg.w1 == 0 and loss_cfg.w3 == 0:
            return None
        loss_cfg = LossConfig(**{**asdict(loss_cfg), "w2": 0.0})
    return combined_objective(scored, loss_cfg)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adamw_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = cfg.learning_rate
    for name, w in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            w -= lr * cfg.weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def train_step(
    batch: PairBatch,
    params: ModelParams,
    state: AdamState,
    cfg: TrainConfig,
    enc: EncoderConfig,
) -> tuple[ModelParams, float]:
    """One forward/backward pass and AdamW update, applied to ``params`` in place."""
    graph = Graph()
    p = {k: graph.param(v) for k, v in params.items()}
    loss = batch_loss(batch, graph, p, enc, cfg.loss)
    if loss is None:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        value = 0.0
    else:
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {state.step + 1}")
        backward(loss)
        grads = {k: t.grad for k, t in p.items()}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in tensor {name!r} at step {state.step + 1}")
    adamw_update(params, grads, state, cfg)
    return params, value


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_metric: float | None


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    initial_metric: float | None
    best_epoch: int


EvalHook = Callable[[ModelParams, EncoderConfig], float]


def fit(
    pairs: Sequence[LabeledPair],
    enc: EncoderConfig,
    cfg: TrainConfig,
    eval_hook: EvalHook | None = None,
    params: ModelParams | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` and keep the checkpoint with the best hook value.

    Without a hook the final epoch wins. ``initial_metric`` is the hook's
    value before any update.
    """
    params = init_params(enc) if params is None else params.copy()
    state = AdamState.zeros(params)

    def snapshot() -> Checkpoint:
        return Checkpoint(
            encoder=enc,
            train=cfg.to_dict(),
            params=params.copy(),
            adam_m={k: v.copy() for k, v in state.m.items()},
            adam_v={k: v.copy() for k, v in state.v.items()},
            step=state.step,
        )

    initial = eval_hook(params, enc) if eval_hook else None
    best = snapshot()
    best_metric = initial
    best_epoch = 0
    history: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        losses = [train_step(b, params, state, cfg, enc)[1] for b in make_batches(pairs, cfg, epoch)]
        train_loss = float(np.mean(losses))
        metric = eval_hook(params, enc) if eval_hook else None
        history.append(EpochLog(epoch, train_loss, metric))
        log.info("epoch %d loss %.6f metric %s", epoch, train_loss, metric)
        if eval_hook is None or best_metric is None or metric > best_metric:
            best, best_metric, best_epoch = snapshot(), metric, epoch
    return FitResult(best, history, initial, best_epoch)

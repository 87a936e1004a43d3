"""Toy transformer text encoder with hashing tokenizer and pooling heads.

Token id 0 is reserved for padding; real tokens hash into
``1 .. vocab_size - 1``. Position 0 of every sequence holds a learned CLS
vector, so at most ``max_len - 1`` text tokens fit.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import Graph, ShapeError, Tensor
from .autodiff import ops

PAD_ID = 0
POOLINGS = ("cls", "cls-last-avg", "last-avg", "last-max", "first-last-avg")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    max_len: int = 32
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    pooling: str = "cls"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (one id is reserved for padding)")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2 to hold the CLS token")
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"dim must be even, got {self.dim}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.n_heads < 1 or self.dim % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide dim={self.dim}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOLINGS}")

    def to_dict(self) -> dict:
        return asdict(self)


def split_tokens(text: str) -> list[str]:
    """Lower-cased word and punctuation tokens, untruncated."""
    return _TOKEN_RE.findall(text.lower())


def token_id(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (vocab_size - 1) + 1


def tokenize(text: str, cfg: EncoderConfig) -> list[int]:
    """Stable hashed ids for the words of ``text``; punctuation is dropped."""
    words = [t for t in split_tokens(text) if t[0].isalnum() or t[0] == "_"]
    return [token_id(w, cfg.vocab_size) for w in words[: cfg.max_len - 1]]


class ModelParams:
    """Named float64 arrays. Iteration order is fixed by construction."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def init_params(cfg: EncoderConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    hidden = 2 * d
    arrays = {
        "token_embedding": rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.vocab_size, d)),
        "position_embedding": rng.normal(0.0, 0.1 / np.sqrt(d), (cfg.max_len, d)),
        "cls": rng.normal(0.0, 1.0 / np.sqrt(d), (d,)),
    }
    arrays["token_embedding"][PAD_ID] = 0.0
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        arrays[p + "ln1.gain"] = np.ones(d)
        arrays[p + "ln1.bias"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + w] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        arrays[p + "bo"] = np.zeros(d)
        arrays[p + "ln2.gain"] = np.ones(d)
        arrays[p + "ln2.bias"] = np.zeros(d)
        arrays[p + "w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden))
        arrays[p + "b1"] = np.zeros(hidden)
        arrays[p + "w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d))
        arrays[p + "b2"] = np.zeros(d)
    return ModelParams(arrays)


def pad_batch(token_lists: Sequence[Sequence[int]], cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, valid_len)``: ids ``(B, max_len - 1)`` and lengths counting CLS."""
    ids = np.full((len(token_lists), cfg.max_len - 1), PAD_ID, dtype=np.int64)
    lengths = np.empty(len(token_lists), dtype=np.int64)
    for row, toks in enumerate(token_lists):
        if len(toks) > cfg.max_len - 1:
            raise ShapeError(f"sequence {row} has {len(toks)} tokens, limit is {cfg.max_len - 1}")
        for t in toks:
            if not 0 < t < cfg.vocab_size:
                raise ValueError(f"token id {t} out of range 1..{cfg.vocab_size - 1}")
        ids[row, : len(toks)] = toks
        lengths[row] = len(toks) + 1
    return ids, lengths


def _bias(x: Tensor, b: Tensor) -> Tensor:
    return ops.add(x, ops.broadcast_to(b, x.shape))


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    shape = x.shape
    keep = shape[:-1] + (1,)
    mu = ops.broadcast_to(ops.mean(x, axis=-1, keepdims=True), shape)
    centred = ops.sub(x, mu)
    var = ops.mean(ops.mul(centred, centred), axis=-1, keepdims=True)
    inv = ops.div(1.0, ops.sqrt(ops.add(var, _LN_EPS)))
    normed = ops.mul(centred, ops.broadcast_to(ops.reshape(inv, keep), shape))
    return _bias(ops.mul(normed, ops.broadcast_to(gain, shape)), bias)


def _attention(x: Tensor, p: dict[str, Tensor], prefix: str, key_mask: np.ndarray, n_heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ops.matmul(x, p[prefix + "wq"]))
    k = heads(ops.matmul(x, p[prefix + "wk"]))
    v = heads(ops.matmul(x, p[prefix + "wv"]))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ops.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    mixed = ops.reshape(ops.transpose(ops.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
    return _bias(ops.matmul(mixed, p[prefix + "wo"]), p[prefix + "bo"])


def encode_batch(
    graph: Graph,
    token_lists: Sequence[Sequence[int]],
    params: dict[str, Tensor],
    cfg: EncoderConfig,
) -> tuple[list[Tensor], np.ndarray]:
    """Hidden states ``(B, max_len, d)`` after the embedding layer and each block.

    Returns the ``n_layers + 1`` states and the per-sequence valid lengths.
    Pad positions are excluded as attention keys, so they never affect
    non-pad rows.
    """
    ids, lengths = pad_batch(token_lists, cfg)
    bsz, d, n = len(token_lists), cfg.dim, cfg.max_len
    tokens = ops.take_rows(params["token_embedding"], ids)
    cls = ops.broadcast_to(ops.reshape(params["cls"], (1, 1, d)), (bsz, 1, d))
    x = ops.concat([cls, tokens], axis=1)
    pos = ops.broadcast_to(ops.reshape(params["position_embedding"], (1, n, d)), (bsz, n, d))
    x = ops.add(x, pos)
    key_mask = np.arange(n)[None, :] < lengths[:, None]
    states = [x]
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = _layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"])
        x = ops.add(x, _attention(h, params, pre, key_mask, cfg.n_heads))
        h = _layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        h = _bias(ops.matmul(h, params[pre + "w1"]), params[pre + "b1"])
        h = _bias(ops.matmul(ops.gelu(h), params[pre + "w2"]), params[pre + "b2"])
        x = ops.add(x, h)
        states.append(x)
    return states, lengths


def _masked_mean(h: Tensor, lengths: np.ndarray) -> Tensor:
    b, n, d = h.shape
    weights = (np.arange(n)[None, :] < lengths[:, None]) / lengths[:, None]
    w = h.graph.constant(np.broadcast_to(weights[:, :, None], (b, n, d)))
    return ops.sum(ops.mul(h, w), axis=1)


def pool_batch(states: Sequence[Tensor], lengths: np.ndarray, pooling: str) -> Tensor:
    """Reduce per-token states to one ``(B, d)`` embedding per sequence."""
    last = states[-1]
    b, n, d = last.shape
    if pooling == "cls":
        return ops.reshape(ops.slice_last(ops.transpose(last, (0, 2, 1)), 0, 1), (b, d))
    if pooling == "last-avg":
        return _masked_mean(last, lengths)
    if pooling == "last-max":
        pad = np.arange(n)[None, :] >= lengths[:, None]
        penalty = last.graph.constant(np.broadcast_to(np.where(pad, -1e30, 0.0)[:, :, None], (b, n, d)))
        return ops.max(ops.add(last, penalty), axis=1)
    if pooling == "cls-last-avg":
        cls = pool_batch(states, lengths, "cls")
        return ops.mul(ops.add(cls, _masked_mean(last, lengths)), 0.5)
    if pooling == "first-last-avg":
        return ops.mul(ops.add(_masked_mean(states[0], lengths), _masked_mean(last, lengths)), 0.5)
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def encode(tokens: Sequence[int], params: ModelParams, cfg: EncoderConfig) -> list[np.ndarray]:
    """Hidden states of a single sequence as plain arrays of shape ``(max_len, d)``."""
    graph = Graph()
    p = {k: graph.constant(v) for k, v in params.items()}
    states, _ = encode_batch(graph, [tokens], p, cfg)
    return [s.values[0] for s in states]


def pool(hiddens: Sequence[np.ndarray], pooling: str, valid_len: int) -> np.ndarray:
    """Pool one sequence's hidden states; ``valid_len`` counts the CLS row."""
    if valid_len < 1:
        raise ValueError("valid_len must be at least 1")
    graph = Graph()
    states = [graph.constant(np.asarray(h, dtype=np.float64)[None]) for h in hiddens]
    return pool_batch(states, np.array([valid_len]), pooling).values[0]


def embed_texts(
    texts: Sequence[str], params: ModelParams, cfg: EncoderConfig, batch_size: int = 256
) -> np.ndarray:
    """Pooled embeddings ``(len(texts), d)``, no gradient tracking."""
    out = np.empty((len(texts), cfg.dim))
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        graph = Graph()
        p = {k: graph.constant(v) for k, v in params.items()}
        states, lengths = encode_batch(graph, [tokenize(t, cfg) for t in chunk], p, cfg)
        out[start : start + len(chunk)] = pool_batch(states, lengths, cfg.pooling).values
    return out

"""Synthetic pair corpora drawn from latent topic clusters.

Topics are grouped into families that share part of their vocabulary, so
negatives drawn from a sibling topic look superficially similar. Every
text mixes topic words with background filler, which makes the binary
labels noisy enough that rank correlation does not saturate immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledPair


@dataclass(frozen=True)
class TopicCorpusConfig:
    n_families: int = 12
    topics_per_family: int = 4
    family_words: int = 6
    topic_words: int = 5
    filler_words: int = 200
    text_len: int = 10
    topic_fraction: float = 0.25
    family_fraction: float = 0.2
    hard_negative_rate: float = 0.5


class TopicCorpus:
    def __init__(self, cfg: TopicCorpusConfig = TopicCorpusConfig(), seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.n_topics = cfg.n_families * cfg.topics_per_family

    def family_of(self, topic: int) -> int:
        return topic // self.cfg.topics_per_family

    def text(self, topic: int) -> str:
        c = self.cfg
        fam = self.family_of(topic)
        words = []
        for _ in range(c.text_len):
            u = self.rng.random()
            if u < c.topic_fraction:
                words.append(f"t{topic}w{self.rng.integers(c.topic_words)}")
            elif u < c.topic_fraction + c.family_fraction:
                words.append(f"f{fam}w{self.rng.integers(c.family_words)}")
            else:
                words.append(f"x{self.rng.integers(c.filler_words)}")
        return " ".join(words)

    def pair(self, positive: bool) -> LabeledPair:
        a = int(self.rng.integers(self.n_topics))
        if positive:
            b = a
        elif self.rng.random() < self.cfg.hard_negative_rate:
            base = self.family_of(a) * self.cfg.topics_per_family
            b = base + int(self.rng.integers(self.cfg.topics_per_family - 1))
            b += b >= a
        else:
            b = int(self.rng.integers(self.n_topics - 1))
            b += b >= a
        return LabeledPair(self.text(a), self.text(b), 1.0 if positive else 0.0)

    def pairs(self, n: int) -> list[LabeledPair]:
        return [self.pair(bool(self.rng.random() < 0.5)) for _ in range(n)]


def topic_pair_splits(
    n_train: int = 2000, n_val: int = 500, seed: int = 0, cfg: TopicCorpusConfig = TopicCorpusConfig()
) -> tuple[list[LabeledPair], list[LabeledPair]]:
    """Train and validation pairs from one shared topic structure."""
    corpus = TopicCorpus(cfg, seed)
    return corpus.pairs(n_train), corpus.pairs(n_val)

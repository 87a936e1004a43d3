"""Pair datasets: file formats, issue-dump pairing, NLI conversion, statistics."""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import split_tokens


class DataError(ValueError):
    """Malformed or unusable dataset input."""

    def __init__(self, message: str, line_numbers: Sequence[int] = ()):
        if line_numbers:
            message = f"{message} (lines {', '.join(map(str, line_numbers))})"
        super().__init__(message)
        self.line_numbers = list(line_numbers)


@dataclass(frozen=True)
class LabeledPair:
    text1: str
    text2: str
    label: float
    subset: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.label):
            raise DataError(f"label must be finite, got {self.label}")


@dataclass
class IssueRecord:
    repo: str
    number: int
    title: str
    body: str = ""
    comments: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.number <= 0:
            raise DataError(f"issue number must be positive, got {self.number}")

    @property
    def text(self) -> str:
        return f"{self.title}\n{self.body}"


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("tsv", "jsonl"):
            raise DataError(f"unknown pair format {fmt!r}; expected tsv or jsonl")
        return fmt
    return "tsv" if path.suffix.lower() in (".tsv", ".txt") else "jsonl"


def load_pairs(path, fmt: str | None = None) -> list[LabeledPair]:
    """Read ``text1<TAB>text2<TAB>label`` lines or JSON-Lines objects.

    ``fmt`` is ``"tsv"`` or ``"jsonl"``; by default it follows the suffix.
    Every malformed line is collected before raising, so one error lists
    all offending line numbers.
    """
    path = Path(path)
    fmt = _detect_format(path, fmt)
    pairs: list[LabeledPair] = []
    bad: list[int] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            try:
                if fmt == "tsv":
                    cols = line.split("\t")
                    if len(cols) != 3:
                        raise ValueError(f"expected 3 columns, got {len(cols)}")
                    pairs.append(LabeledPair(cols[0], cols[1], float(cols[2])))
                else:
                    obj = json.loads(line)
                    pairs.append(
                        LabeledPair(
                            str(obj["text1"]),
                            str(obj["text2"]),
                            float(obj["label"]),
                            obj.get("subset"),
                        )
                    )
            except (ValueError, KeyError, TypeError):
                bad.append(lineno)
    if bad:
        raise DataError(f"malformed pair lines in {path}", bad)
    if not pairs:
        raise DataError(f"no pairs in {path}")
    return pairs


def save_pairs(pairs: Iterable[LabeledPair], path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    with path.open("w", encoding="utf-8") as fh:
        for p in pairs:
            if fmt == "tsv":
                if any(c in t for t in (p.text1, p.text2) for c in "\t\n"):
                    raise DataError("TSV cannot hold texts containing tabs or newlines")
                fh.write(f"{p.text1}\t{p.text2}\t{p.label!r}\n")
            else:
                obj = {"text1": p.text1, "text2": p.text2, "label": p.label}
                if p.subset is not None:
                    obj["subset"] = p.subset
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_issues(path) -> list[IssueRecord]:
    records = []
    bad = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    IssueRecord(
                        repo=str(obj["repo"]),
                        number=int(obj["number"]),
                        title=str(obj.get("title", "")),
                        body=str(obj.get("body") or ""),
                        comments=[str(c) for c in obj.get("comments", [])],
                    )
                )
            except (ValueError, KeyError, TypeError):
                bad.append(lineno)
    if bad:
        raise DataError(f"malformed issue records in {path}", bad)
    return records


_DUPLICATE_RE = re.compile(r"duplicate\s+of\s+#(\d+)", re.IGNORECASE)


@dataclass
class IssuePairing:
    pairs: list[LabeledPair]
    n_positive: int
    n_negative: int
    n_dangling: int


def pair_issues(
    records: Sequence[IssueRecord], negative_ratio: float = 1.0, seed: int = 0
) -> IssuePairing:
    """Turn "duplicate of #N" comments into positive pairs and sample negatives.

    A reference resolves only within the commenting issue's repository;
    references to issues missing from the dump are counted as dangling.
    Negatives pair issues that are not linked as duplicates (directly or
    transitively). Each issue joins at most one negative, and at most
    ``ceil(negative_ratio * n_positive)`` negatives are produced.
    """
    by_key: dict[tuple[str, int], IssueRecord] = {}
    for r in records:
        key = (r.repo, r.number)
        if key in by_key:
            raise DataError(f"duplicate issue number {r.number} in {r.repo}")
        by_key[key] = r

    # union-find over duplicate links, for negative exclusion
    parent = {k: k for k in by_key}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    positives: list[LabeledPair] = []
    seen: set[frozenset] = set()
    dangling = 0
    for r in records:
        for comment in r.comments:
            for match in _DUPLICATE_RE.finditer(comment):
                target = (r.repo, int(match.group(1)))
                if target not in by_key:
                    dangling += 1
                    continue
                src = (r.repo, r.number)
                link = frozenset((src, target))
                if target == src or link in seen:
                    continue
                seen.add(link)
                parent[find(src)] = find(target)
                positives.append(LabeledPair(r.text, by_key[target].text, 1.0, r.repo))

    limit = math.ceil(negative_ratio * len(positives))
    keys = sorted(by_key)
    random.Random(seed).shuffle(keys)
    negatives: list[LabeledPair] = []
    used: set = set()
    for i, a in enumerate(keys):
        if len(negatives) >= limit:
            break
        if a in used:
            continue
        for b in keys[i + 1 :]:
            if b in used or b[0] != a[0] or find(a) == find(b):
                continue
            used.update((a, b))
            negatives.append(LabeledPair(by_key[a].text, by_key[b].text, 0.0, a[0]))
            break
    return IssuePairing(positives + negatives, len(positives), len(negatives), dangling)


_NLI_LABELS = {"entailment": 1.0, "contradiction": 0.0, "neutral": None}


def nli_to_pairs(premise: str, hypothesis: str, relation: str) -> LabeledPair | None:
    """Entailment becomes label 1, contradiction label 0; neutral is dropped."""
    if relation not in _NLI_LABELS:
        raise DataError(f"unknown NLI relation {relation!r}")
    label = _NLI_LABELS[relation]
    return None if label is None else LabeledPair(premise, hypothesis, label)


@dataclass
class DatasetStats:
    n_positive: int
    n_negative: int
    total: int
    long_fraction: float
    length_quantiles: dict[float, float]

    def as_row(self) -> dict:
        row = {
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "total": self.total,
            "long_fraction": self.long_fraction,
        }
        row.update({f"len_q{int(q * 100):02d}": v for q, v in self.length_quantiles.items()})
        return row


QUANTILES = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)


def dataset_stats(
    pairs: Sequence[LabeledPair],
    tokenizer: Callable[[str], Sequence] = split_tokens,
    long_threshold: int = 512,
) -> DatasetStats:
    """Positive/negative counts and token-length profile of every pair side.

    A pair is positive when its label is at least 0.5.
    """
    n_pos = sum(1 for p in pairs if p.label >= 0.5)
    lengths = np.array([len(tokenizer(t)) for p in pairs for t in (p.text1, p.text2)], dtype=float)
    if lengths.size:
        long_fraction = float(np.mean(lengths > long_threshold))
        quantiles = {q: float(np.quantile(lengths, q)) for q in QUANTILES}
    else:
        long_fraction = 0.0
        quantiles = {q: 0.0 for q in QUANTILES}
    return DatasetStats(n_pos, len(pairs) - n_pos, len(pairs), long_fraction, quantiles)

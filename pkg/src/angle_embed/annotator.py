"""LLM-generated positive/negative sentence pairs.

The transport is any callable taking a chat-completion request body and
returning the assistant's text. :class:`HttpTransport` speaks the common
``POST {base_url}/chat/completions`` protocol; :class:`MockTransport` is
deterministic and never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .data import LabeledPair
from .trainer import normalize_text

log = logging.getLogger(__name__)

API_KEY_ENV = "ANGLE_LLM_API_KEY"
POLARITIES = ("synonymous", "antonym")
MAX_RETRIES = 3

_TEMPLATE = (
    "You are a highly smart {meaning} sentence-generating system, your job is to "
    "generate {size} {polarity} sentences of a given input sentence. "
    "Input sentence: {text}. Output:"
)
_MEANING = {"synonymous": "same-meaning", "antonym": "opposite-meaning"}


class TransientError(Exception):
    """A retryable transport failure (timeout, 429, 5xx)."""


class AnnotationError(Exception):
    """A request failed permanently."""


@dataclass(frozen=True)
class AnnotationRequest:
    text: str = ""
    polarity: str = "synonymous"
    size: int = 3
    model: str = "gpt-3.5-turbo"
    endpoint: str = "https://api.openai.com/v1"
    timeout: float = 30.0
    max_in_flight: int = 4
    temperature: float = 0.7

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if self.size < 1:
            raise ValueError("size must be at least 1")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


@dataclass
class AnnotatedSet:
    source: str
    polarity: str
    generated: list[str]
    model: str


@dataclass
class AnnotationReport:
    sets: list[AnnotatedSet] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def write_failures(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for f in self.failures:
                fh.write(json.dumps(f, ensure_ascii=False) + "\n")


def build_prompt(req: AnnotationRequest) -> str:
    return _TEMPLATE.format(
        meaning=_MEANING[req.polarity], size=req.size, polarity=req.polarity, text=req.text
    )


def request_body(req: AnnotationRequest) -> dict:
    return {
        "model": req.model,
        "messages": [{"role": "user", "content": build_prompt(req)}],
        "temperature": req.temperature,
    }


_MARKER_RE = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*")
_QUOTES = "\"'“”‘’`"


def parse_generations(response: str, source: str = "") -> list[str]:
    """One sentence per non-blank line, list markers and quotes stripped.

    Duplicates (after case and whitespace folding) and copies of ``source``
    are dropped.
    """
    seen = {normalize_text(source)} if source else set()
    out = []
    for line in response.splitlines():
        s = _MARKER_RE.sub("", line).strip().strip(_QUOTES).strip()
        key = normalize_text(s)
        if not key or key in seen:
            continue
        seen.add(key)
        out.append(s)
    return out


Transport = Callable[[dict, float], str]


class HttpTransport:
    """Chat-completion client over HTTP; the key comes from ``ANGLE_LLM_API_KEY``."""

    def __init__(self, endpoint: str, api_key: str | None = None):
        import httpx

        self._httpx = httpx
        self.url = endpoint.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise AnnotationError(f"no API key: set {API_KEY_ENV}")

    def __call__(self, body: dict, timeout: float) -> str:
        httpx = self._httpx
        try:
            resp = httpx.post(
                self.url,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=timeout,
            )
        except (httpx.TimeoutException, httpx.TransportError) as e:
            raise TransientError(str(e)) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise AnnotationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise AnnotationError(f"unexpected response shape: {e}") from e


class MockTransport:
    """Deterministic stand-in that fabricates numbered variants of the input.

    ``responses`` overrides the output for prompts containing a given
    source text. ``in_flight``/``max_seen`` record concurrency.
    """

    def __init__(self, responses: dict[str, str] | None = None, delay: float = 0.0):
        self.responses = responses or {}
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_seen = 0
        self._lock = threading.Lock()

    def __call__(self, body: dict, timeout: float) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_seen = max(self.max_seen, self.in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            prompt = body["messages"][0]["content"]
            for key, text in self.responses.items():
                if f"Input sentence: {key}. Output:" in prompt:
                    return text
            m = re.search(r"generate (\d+) (\w+) sentences.*Input sentence: (.*)\. Output:$", prompt, re.S)
            size, polarity, text = int(m.group(1)), m.group(2), m.group(3)
            tag = "same" if polarity == "synonymous" else "opposite"
            digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:6]
            return "\n".join(f"{i + 1}. {text} ({tag} {digest}-{i})" for i in range(size))
        finally:
            with self._lock:
                self.in_flight -= 1


def _call_with_retry(transport: Transport, body: dict, timeout: float, sleep, backoff: float) -> str:
    for attempt in range(MAX_RETRIES + 1):
        try:
            return transport(body, timeout)
        except TransientError:
            if attempt == MAX_RETRIES:
                raise
            sleep(backoff * 2**attempt)
    raise AssertionError("unreachable")


def annotate(
    texts: Sequence[str],
    template: AnnotationRequest,
    transport: Transport,
    polarities: Iterable[str] = POLARITIES,
    sleep: Callable[[float], None] = time.sleep,
    backoff: float = 0.5,
) -> AnnotationReport:
    """Request generations for every ``(text, polarity)`` combination.

    At most ``template.max_in_flight`` requests are outstanding at once.
    Transient failures are retried up to three times with exponential
    backoff; texts that still fail, or whose response parses to nothing,
    are recorded in ``report.failures`` and the run carries on.
    """
    jobs = [replace(template, text=t, polarity=pol) for t in texts for pol in polarities]

    def run(req: AnnotationRequest):
        try:
            raw = _call_with_retry(transport, request_body(req), req.timeout, sleep, backoff)
        except (TransientError, AnnotationError) as e:
            return req, None, f"{type(e).__name__}: {e}"
        generated = parse_generations(raw, req.text)
        if not generated:
            return req, None, "empty response"
        return req, generated, None

    report = AnnotationReport()
    with ThreadPoolExecutor(max_workers=template.max_in_flight) as pool:
        # map preserves submission order, keeping output deterministic
        for req, generated, error in pool.map(run, jobs):
            if error is not None:
                log.warning("annotation failed for %r (%s): %s", req.text, req.polarity, error)
                report.failures.append({"text": req.text, "polarity": req.polarity, "error": error})
            else:
                report.sets.append(AnnotatedSet(req.text, req.polarity, generated, req.model))
    return report


def to_pairs(sets: Iterable[AnnotatedSet]) -> list[LabeledPair]:
    pairs = []
    for s in sets:
        label = 1.0 if s.polarity == "synonymous" else 0.0
        pairs.extend(LabeledPair(s.source, g, label) for g in s.generated)
    return pairs


@dataclass
class MergeResult:
    pairs: list[LabeledPair]
    conflicts: int


def ensemble_merge(per_model: Sequence[Sequence[LabeledPair]]) -> MergeResult:
    """Union of several models' pairs.

    Pairs with the same normalised texts (in either order) and label
    collapse to one; pairs whose label differs between models are dropped
    and counted. Output is sorted so the merge is order independent.
    """
    if not per_model:
        raise ValueError("need at least one model's pairs")
    labels: dict[tuple[str, str], set[float]] = {}
    first: dict[tuple[str, str], LabeledPair] = {}
    for pairs in per_model:
        for p in pairs:
            key = tuple(sorted((normalize_text(p.text1), normalize_text(p.text2))))
            labels.setdefault(key, set()).add(p.label)
            if key not in first or (p.text1, p.text2) < (first[key].text1, first[key].text2):
                first[key] = p
    merged = []
    conflicts = 0
    for key in sorted(labels):
        if len(labels[key]) > 1:
            conflicts += 1
        else:
            p = first[key]
            merged.append(LabeledPair(p.text1, p.text2, p.label, p.subset))
    return MergeResult(merged, conflicts)

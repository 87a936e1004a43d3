import json

import httpx
import pytest

from angle_embed.annotator import (
    API_KEY_ENV,
    AnnotatedSet,
    AnnotationError,
    AnnotationRequest,
    HttpTransport,
    MockTransport,
    TransientError,
    annotate,
    build_prompt,
    ensemble_merge,
    parse_generations,
    request_body,
    to_pairs,
)
from angle_embed.data import LabeledPair


class TestPrompt:
    def test_synonymous(self):
        prompt = build_prompt(AnnotationRequest(text="the cat sat", polarity="synonymous", size=2))
        assert prompt == (
            "You are a highly smart same-meaning sentence-generating system, your job is to "
            "generate 2 synonymous sentences of a given input sentence. Input sentence: the cat sat. Output:"
        )

    def test_antonym(self):
        prompt = build_prompt(AnnotationRequest(text="hot day", polarity="antonym", size=1))
        assert "opposite-meaning" in prompt and "generate 1 antonym sentences" in prompt
        assert "same-meaning" not in prompt and "synonymous" not in prompt

    def test_text_appears_once(self):
        prompt = build_prompt(AnnotationRequest(text="zebra crossing"))
        assert prompt.count("zebra crossing") == 1

    def test_request_body(self):
        body = request_body(AnnotationRequest(text="x", model="m1", temperature=0.2))
        assert body["model"] == "m1" and body["temperature"] == 0.2
        assert body["messages"][0]["role"] == "user"

    @pytest.mark.parametrize("kwargs", [{"size": 0}, {"timeout": 0.0}, {"polarity": "neutral"}, {"max_in_flight": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AnnotationRequest(**kwargs)


class TestParse:
    def test_numbered(self):
        assert parse_generations("1. A\n2. B") == ["A", "B"]

    def test_markers_and_quotes(self):
        assert parse_generations('- "First one"\n* \'Second\'\n3) Third\n\n') == ["First one", "Second", "Third"]

    def test_drops_duplicates_and_source(self):
        assert parse_generations("1. Same  thing\n2. same thing\n3. the source", source="The source") == ["Same  thing"]

    def test_blank(self):
        assert parse_generations("\n  \n") == []


def no_sleep(_):
    pass


class TestAnnotate:
    def test_mock_parsing(self):
        transport = MockTransport({"cat": "1. A\n2. B"})
        report = annotate(["cat"], AnnotationRequest(size=2), transport, polarities=["synonymous"])
        assert report.sets[0].generated == ["A", "B"]
        assert report.failures == []

    def test_blank_response_is_failure(self):
        transport = MockTransport({"cat": "\n\n"})
        report = annotate(["cat"], AnnotationRequest(), transport, polarities=["synonymous"])
        assert report.sets == [] and len(report.failures) == 1
        assert to_pairs(report.sets) == []

    def test_in_flight_bound(self):
        transport = MockTransport(delay=0.02)
        texts = [f"sentence {i}" for i in range(10)]
        report = annotate(texts, AnnotationRequest(max_in_flight=2), transport)
        assert transport.max_seen <= 2
        assert transport.calls == 20
        assert len(report.sets) == 20

    def test_deterministic_and_ordered(self):
        texts = ["b text", "a text", "c text"]
        first = annotate(texts, AnnotationRequest(max_in_flight=3), MockTransport(delay=0.001))
        second = annotate(texts, AnnotationRequest(max_in_flight=1), MockTransport())
        assert [(s.source, s.polarity, s.generated) for s in first.sets] == [
            (s.source, s.polarity, s.generated) for s in second.sets
        ]
        assert [s.source for s in first.sets] == ["b text", "b text", "a text", "a text", "c text", "c text"]

    def test_retries_then_succeeds(self):
        calls = []

        def flaky(body, timeout):
            calls.append(timeout)
            if len(calls) < 3:
                raise TransientError("503")
            return "1. fine"

        waits = []
        report = annotate(["x"], AnnotationRequest(timeout=5.0), flaky, ["synonymous"], sleep=waits.append, backoff=0.1)
        assert report.sets[0].generated == ["fine"]
        assert waits == [0.1, 0.2]
        assert calls == [5.0, 5.0, 5.0]

    def test_exhausted_retries_recorded(self, tmp_path):
        def down(body, timeout):
            raise TransientError("timeout")

        attempts = []
        report = annotate(["x", "y"], AnnotationRequest(), lambda b, t: attempts.append(1) or down(b, t), ["antonym"], sleep=no_sleep)
        assert len(attempts) == 8  # 1 try + 3 retries per text
        assert [f["text"] for f in report.failures] == ["x", "y"]
        report.write_failures(tmp_path / "f.jsonl")
        lines = (tmp_path / "f.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["polarity"] == "antonym"

    def test_permanent_error_not_retried(self):
        attempts = []

        def bad(body, timeout):
            attempts.append(1)
            raise AnnotationError("HTTP 400")

        report = annotate(["x"], AnnotationRequest(), bad, ["synonymous"], sleep=no_sleep)
        assert len(attempts) == 1 and len(report.failures) == 1


class TestHttpTransport:
    def _patch(self, monkeypatch, handler):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        monkeypatch.setattr(httpx, "post", client.post)

    def test_success(self, monkeypatch):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers["authorization"]
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"choices": [{"message": {"content": "1. hi"}}]})

        self._patch(monkeypatch, handler)
        t = HttpTransport("http://llm.local/v1/", api_key="k")
        assert t({"model": "m"}, 1.0) == "1. hi"
        assert seen == {"url": "http://llm.local/v1/chat/completions", "auth": "Bearer k", "body": {"model": "m"}}

    @pytest.mark.parametrize("status, error", [(429, TransientError), (503, TransientError), (401, AnnotationError)])
    def test_status_mapping(self, monkeypatch, status, error):
        self._patch(monkeypatch, lambda request: httpx.Response(status, text="nope"))
        with pytest.raises(error):
            HttpTransport("http://llm.local/v1", api_key="k")({}, 1.0)

    def test_bad_shape(self, monkeypatch):
        self._patch(monkeypatch, lambda request: httpx.Response(200, json={"choices": []}))
        with pytest.raises(AnnotationError):
            HttpTransport("http://llm.local/v1", api_key="k")({}, 1.0)

    def test_key_from_environment(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "secret")
        assert HttpTransport("http://x").api_key == "secret"
        monkeypatch.delenv(API_KEY_ENV)
        with pytest.raises(AnnotationError):
            HttpTransport("http://x")


class TestPairsAndMerge:
    def test_to_pairs(self):
        sets = [AnnotatedSet("s", "synonymous", ["a", "b"], "m"), AnnotatedSet("s", "antonym", ["c"], "m")]
        assert to_pairs(sets) == [LabeledPair("s", "a", 1.0), LabeledPair("s", "b", 1.0), LabeledPair("s", "c", 0.0)]

    def test_disjoint_union(self):
        a = [LabeledPair("x", "y", 1.0)]
        b = [LabeledPair("p", "q", 0.0)]
        assert sorted(ensemble_merge([a, b]).pairs, key=lambda p: p.text1) == sorted(a + b, key=lambda p: p.text1)

    def test_duplicate_collapses(self):
        out = ensemble_merge([[LabeledPair("x", "y", 1.0)], [LabeledPair("Y", " x", 1.0)]])
        assert len(out.pairs) == 1 and out.conflicts == 0

    def test_conflict_dropped(self):
        out = ensemble_merge([[LabeledPair("x", "y", 1.0)], [LabeledPair("x", "y", 0.0)]])
        assert out.pairs == [] and out.conflicts == 1

    def test_commutative_and_idempotent(self):
        a = [LabeledPair("x", "y", 1.0), LabeledPair("u", "v", 0.0)]
        b = [LabeledPair("y", "x", 1.0), LabeledPair("m", "n", 1.0), LabeledPair("u", "v", 1.0)]
        ab, ba = ensemble_merge([a, b]), ensemble_merge([b, a])
        assert ab == ba
        assert ensemble_merge([ab.pairs, ab.pairs]).pairs == ab.pairs

    def test_needs_input(self):
        with pytest.raises(ValueError):
            ensemble_merge([])

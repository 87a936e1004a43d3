import numpy as np
import pytest

from angle_embed.autodiff import Graph, ShapeError, finite_difference_check
from angle_embed.encoder import (
    PAD_ID,
    POOLINGS,
    EncoderConfig,
    encode,
    embed_texts,
    encode_batch,
    init_params,
    pad_batch,
    pool,
    pool_batch,
    tokenize,
)
from angle_embed.objectives import LossConfig
from angle_embed.data import LabeledPair
from angle_embed.trainer import PairBatch, batch_loss


SMALL = EncoderConfig(vocab_size=64, max_len=8, dim=8, n_layers=1, n_heads=2)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"dim": 7, "n_heads": 1}, {"dim": 8, "n_heads": 3}, {"max_len": 1}, {"pooling": "mean"}, {"vocab_size": 1}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            EncoderConfig(**kwargs)

    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.vocab_size, cfg.max_len, cfg.dim, cfg.n_layers, cfg.n_heads, cfg.pooling) == (4096, 32, 32, 2, 4, "cls")


class TestTokenize:
    def test_repeated_word(self):
        ids = tokenize("a b a", EncoderConfig())
        assert len(ids) == 3 and ids[0] == ids[2] != ids[1]

    def test_empty(self):
        assert tokenize("", EncoderConfig()) == []

    def test_case_and_punctuation(self):
        ids = tokenize("Hello, hello", EncoderConfig())
        assert len(ids) == 2 and ids[0] == ids[1]

    def test_truncation(self):
        cfg = EncoderConfig(max_len=4)
        assert len(tokenize("one two three four five", cfg)) == 3

    def test_ids_in_range_and_never_pad(self):
        cfg = EncoderConfig(vocab_size=5, max_len=64)
        ids = tokenize(" ".join(f"w{i}" for i in range(30)), cfg)
        assert all(0 < i < cfg.vocab_size for i in ids)

    def test_stable_across_runs(self):
        # frozen values guard against hash changes between platforms
        assert tokenize("the cat", EncoderConfig()) == tokenize("THE   cat!", EncoderConfig())
        assert tokenize("the cat", EncoderConfig()) == [3391, 2470]


class TestEncode:
    def test_zero_layers_is_embedding_plus_position(self):
        cfg = EncoderConfig(vocab_size=32, max_len=6, dim=4, n_layers=0, n_heads=1)
        params = init_params(cfg)
        states = encode([3, 7], params, cfg)
        assert len(states) == 1
        expected = np.vstack([params["cls"], params["token_embedding"][[3, 7, PAD_ID, PAD_ID, PAD_ID]]])
        np.testing.assert_array_equal(states[0], expected + params["position_embedding"])

    def test_layer_count(self):
        states = encode([1, 2, 3], init_params(SMALL), SMALL)
        assert len(states) == 2 and states[0].shape == (8, 8)

    def test_all_pad_input(self):
        params = init_params(SMALL)
        states = encode([], params, SMALL)
        assert np.isfinite(states[-1][0]).all()
        # with only CLS visible, attention returns CLS's own value vector
        other = init_params(SMALL)
        other_params = {k: v for k, v in params.items()}
        other_params["token_embedding"] = other["token_embedding"]
        again = encode([], type(params)(other_params), SMALL)
        np.testing.assert_array_equal(states[-1][0], again[-1][0])

    def test_deterministic(self):
        params = init_params(SMALL)
        a = encode([5, 9, 2], params, SMALL)
        b = encode([5, 9, 2], params, SMALL)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_out_of_range_token(self):
        with pytest.raises(ValueError):
            encode([SMALL.vocab_size], init_params(SMALL), SMALL)
        with pytest.raises(ValueError):
            encode([PAD_ID], init_params(SMALL), SMALL)

    def test_too_long(self):
        with pytest.raises(ShapeError):
            encode(list(range(1, SMALL.max_len + 1)), init_params(SMALL), SMALL)

    def test_init_is_seeded(self):
        a = init_params(SMALL)
        b = init_params(SMALL)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert a.all_finite()


class TestPool:
    def test_cls(self):
        h = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(pool([h], "cls", 2), [0.0, 1.0, 2.0, 3.0])

    def test_last_max(self):
        h = np.array([[1.0, 5.0], [3.0, 2.0], [100.0, 100.0]])
        np.testing.assert_array_equal(pool([h], "last-max", 2), [3.0, 5.0])

    def test_last_avg(self):
        h = np.array([[1.0, 5.0], [3.0, 2.0], [100.0, 100.0]])
        np.testing.assert_array_equal(pool([h], "last-avg", 2), [2.0, 3.5])

    def test_cls_last_avg_of_equal_vectors(self):
        v = np.array([0.5, -1.5])
        np.testing.assert_array_equal(pool([np.vstack([v, v, [9.0, 9.0]])], "cls-last-avg", 2), v)

    def test_first_last_avg(self):
        first = np.array([[0.0, 2.0], [2.0, 4.0], [7.0, 7.0]])
        last = np.array([[4.0, 0.0], [4.0, 2.0], [7.0, 7.0]])
        np.testing.assert_array_equal(pool([first, last], "first-last-avg", 2), [2.5, 2.0])

    def test_unknown(self):
        with pytest.raises(ValueError):
            pool([np.ones((2, 2))], "median", 1)

    @pytest.mark.parametrize("pooling", POOLINGS)
    def test_padding_does_not_leak(self, pooling):
        short = EncoderConfig(vocab_size=64, max_len=6, dim=8, n_layers=2, n_heads=2, pooling=pooling)
        long = EncoderConfig(vocab_size=64, max_len=12, dim=8, n_layers=2, n_heads=2, pooling=pooling)
        params = init_params(long)
        trimmed = type(params)({k: (v[:6] if k == "position_embedding" else v) for k, v in params.items()})
        toks = [4, 17, 33]
        a = pool(encode(toks, trimmed, short), pooling, 4)
        b = pool(encode(toks, params, long), pooling, 4)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("pooling", POOLINGS)
    def test_batched_matches_single(self, pooling):
        cfg = EncoderConfig(vocab_size=64, max_len=8, dim=8, n_layers=1, n_heads=2, pooling=pooling)
        params = init_params(cfg)
        texts = ["red fox", "a slow green turtle walks", ""]
        batched = embed_texts(texts, params, cfg)
        for row, text in zip(batched, texts):
            toks = tokenize(text, cfg)
            single = pool(encode(toks, params, cfg), pooling, len(toks) + 1)
            np.testing.assert_allclose(row, single, atol=1e-12)


def test_pad_batch_lengths_count_cls():
    ids, lengths = pad_batch([[3], [], [1, 2, 4]], SMALL)
    assert ids.shape == (3, 7)
    np.testing.assert_array_equal(lengths, [2, 1, 4])
    assert (ids[1] == PAD_ID).all()


@pytest.mark.parametrize("pooling", POOLINGS)
def test_parameter_gradients(pooling):
    enc = EncoderConfig(vocab_size=16, max_len=5, dim=8, n_layers=1, n_heads=2, pooling=pooling, seed=3)
    params = init_params(enc)
    batch = PairBatch.from_pairs([LabeledPair("a b c", "a b d", 1.0), LabeledPair("e f", "g h a", 0.0)])
    cfg = LossConfig(tau_cos=0.5, tau_ibn=0.5)

    def f(p):
        return batch_loss(batch, next(iter(p.values())).graph, p, enc, cfg)

    assert finite_difference_check(f, dict(params.items()), 1e-5) <= 1e-4


def test_encode_batch_rejects_mixed_graphs():
    params = init_params(SMALL)
    p = {k: Graph().constant(v) for k, v in params.items()}
    with pytest.raises(ValueError):
        encode_batch(Graph(), [[1, 2]], p, SMALL)


def test_pool_batch_shape():
    g = Graph()
    states = [g.constant(np.ones((3, 4, 2)))]
    assert pool_batch(states, np.array([1, 2, 4]), "last-avg").shape == (3, 2)

import struct

import numpy as np
import pytest

from angle_embed.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from angle_embed.data import LabeledPair
from angle_embed.encoder import EncoderConfig, init_params
from angle_embed.objectives import LossConfig
from angle_embed.trainer import (
    AdamState,
    NumericError,
    PairBatch,
    TrainConfig,
    adamw_update,
    fit,
    make_batches,
    normalize_text,
    train_step,
)

ENC = EncoderConfig(vocab_size=64, max_len=8, dim=8, n_layers=1, n_heads=2, seed=1)

TOY = [
    LabeledPair("red apple fruit", "apple red", 1.0),
    LabeledPair("blue ocean water", "car engine oil", 0.0),
    LabeledPair("green grass field", "grass green", 1.0),
    LabeledPair("fast car race", "quiet library book", 0.0),
]


def pairs_of(n):
    return [LabeledPair(f"text {i}", f"other {i}", float(i % 2)) for i in range(n)]


class TestMakeBatches:
    def test_sizes(self):
        assert [len(b) for b in make_batches(pairs_of(10), TrainConfig(batch_size=4))] == [4, 4, 2]

    def test_duplicates_share_group(self):
        pairs = [LabeledPair("x", "y", 1.0), LabeledPair(" X ", "z", 0.0)]
        b = make_batches(pairs, TrainConfig(shuffle=False))[0]
        assert b.texts == ["x", "y", " X ", "z"]
        g = b.duplicate_groups
        assert g[0] == g[2] and len({g[0], g[1], g[3]}) == 3

    def test_same_seed_same_order(self):
        a = make_batches(pairs_of(20), TrainConfig(batch_size=3, seed=7))
        b = make_batches(pairs_of(20), TrainConfig(batch_size=3, seed=7))
        assert [x.texts for x in a] == [x.texts for x in b]

    def test_epochs_reshuffle(self):
        cfg = TrainConfig(batch_size=20, seed=7)
        assert make_batches(pairs_of(20), cfg, 1)[0].texts != make_batches(pairs_of(20), cfg, 2)[0].texts

    def test_no_shuffle_keeps_order(self):
        b = make_batches(pairs_of(5), TrainConfig(batch_size=5, shuffle=False))[0]
        assert b.texts[::2] == [f"text {i}" for i in range(5)]

    def test_anchors_are_positive_pairs(self):
        b = PairBatch.from_pairs([LabeledPair("a", "b", 1.0), LabeledPair("c", "d", 0.3), LabeledPair("e", "f", 1.0)])
        np.testing.assert_array_equal(b.positive_index, [[0, 1], [4, 5]])

    def test_empty(self):
        with pytest.raises(ValueError):
            make_batches([], TrainConfig())


def test_normalize_text():
    assert normalize_text("  Hello \t World\n") == "hello world"


class TestTrainStep:
    def test_zero_learning_rate(self):
        params = init_params(ENC)
        before = params.copy()
        batch = PairBatch.from_pairs(TOY)
        _, loss = train_step(batch, params, AdamState.zeros(params), TrainConfig(learning_rate=0.0), ENC)
        assert loss > 0
        assert all(np.array_equal(before[k], params[k]) for k in params)

    def test_single_pair_only_weight_decay(self):
        params = init_params(ENC)
        before = params.copy()
        cfg = TrainConfig(loss=LossConfig(w1=1.0, w2=0.0, w3=0.0))
        _, loss = train_step(PairBatch.from_pairs(TOY[:1]), params, AdamState.zeros(params), cfg, ENC)
        assert loss == 0.0
        decay = 1.0 - cfg.learning_rate * cfg.weight_decay
        for k in params:
            np.testing.assert_allclose(params[k], before[k] * decay, rtol=1e-15, atol=0)

    def test_zero_gradient_and_no_decay_is_identity(self):
        params = init_params(ENC)
        before = params.copy()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        adamw_update(params, grads, AdamState.zeros(params), TrainConfig(weight_decay=0.0))
        assert all(np.array_equal(before[k], params[k]) for k in params)

    def test_equal_labels_only_ibn_moves(self):
        pairs = [LabeledPair("a b", "a c", 1.0), LabeledPair("d e", "f g", 1.0)]
        params = init_params(ENC)
        before = params.copy()
        cfg = TrainConfig(weight_decay=0.0, loss=LossConfig(w1=1.0, w2=0.0, w3=1.0))
        _, loss = train_step(PairBatch.from_pairs(pairs), params, AdamState.zeros(params), cfg, ENC)
        assert loss == 0.0
        assert all(np.array_equal(before[k], params[k]) for k in params)

    def test_descent(self):
        pairs = TOY[:2]
        params = init_params(ENC)
        state = AdamState.zeros(params)
        cfg = TrainConfig()
        batch = PairBatch.from_pairs(pairs)
        losses = [train_step(batch, params, state, cfg, ENC)[1] for _ in range(200)]
        assert losses[-1] < losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_tensor(self):
        params = init_params(ENC)
        params["layer0.w1"][0, 0] = np.inf
        with pytest.raises(NumericError, match="layer0.w1|loss"):
            train_step(PairBatch.from_pairs(TOY), params, AdamState.zeros(params), TrainConfig(), ENC)


class TestFit:
    def test_zero_epochs(self):
        result = fit(TOY, ENC, TrainConfig(epochs=0))
        assert result.log == []
        init = init_params(ENC)
        assert all(np.array_equal(init[k], result.checkpoint.params[k]) for k in init)

    def test_bit_identical_replay(self):
        cfg = TrainConfig(epochs=3, batch_size=2, seed=4)
        a = fit(TOY, ENC, cfg)
        b = fit(TOY, ENC, cfg)
        assert [e.train_loss for e in a.log] == [e.train_loss for e in b.log]
        assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)

    def test_keeps_best_epoch(self):
        scores = iter([0.1, 0.5, 0.9, 0.2])
        result = fit(TOY, ENC, TrainConfig(epochs=3, batch_size=2), eval_hook=lambda p, e: next(scores))
        assert result.initial_metric == 0.1
        assert [e.val_metric for e in result.log] == [0.5, 0.9, 0.2]
        assert result.best_epoch == 2
        assert result.checkpoint.step == 4

    def test_does_not_mutate_given_params(self):
        params = init_params(ENC)
        before = params.copy()
        fit(TOY, ENC, TrainConfig(epochs=1), params=params)
        assert all(np.array_equal(before[k], params[k]) for k in params)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"learning_rate": -1.0}, {"epochs": -1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_loss_dict_coerced(self):
        assert TrainConfig(loss={"w2": 0.0}).loss == LossConfig(w2=0.0)


@pytest.fixture(scope="module")
def trained():
    return fit(TOY, ENC, TrainConfig(epochs=2, batch_size=2)).checkpoint


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained, path)
        loaded = load_checkpoint(path)
        assert loaded.encoder == trained.encoder
        assert loaded.train == trained.train
        assert loaded.step == trained.step
        for k in trained.params:
            assert loaded.params[k].tobytes() == trained.params[k].tobytes()
            assert loaded.adam_m[k].tobytes() == trained.adam_m[k].tobytes()
            assert loaded.adam_v[k].tobytes() == trained.adam_v[k].tobytes()

    def test_save_load_save_is_byte_identical(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_layout(self, trained):
        raw = to_bytes(trained)
        assert raw[:16] == MAGIC == b"ANGLEEMB\x00CKPT\x00v1"
        (n,) = struct.unpack_from("<Q", raw, 16)
        assert raw[24 : 24 + n].startswith(b"{")
        expected = sum(v.size for _, v in trained.params.items()) * 3 * 8
        assert len(raw) == 24 + n + expected

    def test_wrong_magic(self, trained):
        raw = bytearray(to_bytes(trained))
        raw[0] ^= 0xFF
        with pytest.raises(CheckpointFormatError):
            from_bytes(bytes(raw))

    def test_future_version(self, trained):
        newer = Checkpoint(**{**trained.__dict__, "version": 2})
        with pytest.raises(CheckpointVersionError):
            from_bytes(to_bytes(newer))

    @pytest.mark.parametrize("keep", [5, 20, 60, -8])
    def test_truncated(self, trained, keep):
        raw = to_bytes(trained)
        with pytest.raises(CheckpointTruncatedError):
            from_bytes(raw[:keep])

    def test_error_kinds_are_distinct(self):
        kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError}
        assert len(kinds) == 3
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)

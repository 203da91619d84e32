"""Model construction, forward passes, training loop and serialization.

Forward passes are checked against independent hand-rolled numpy
computations; the training loop against determinism and no-op properties;
the container format against byte-level corruption.
"""

import struct

import numpy as np
import pytest
from conftest import make_model, random_word

from charcd.autodiff import Rng, Tensor
from charcd.corpus import DEFAULT_TOY_RULESET, PAD_ID, WordSample, encode_word
from charcd.models import (
    CnnConfig,
    Dataset,
    LstmConfig,
    ModelError,
    ModelFormatError,
    TrainConfig,
    TrainingDiverged,
    bilstm_forward,
    classify,
    cnn_forward,
    config_from_dict,
    evaluate_accuracy,
    init_params,
    joint_loss,
    load_model,
    majority_vote_labels,
    save_model,
    train,
    word_loss,
)

# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


class TestConfigs:
    def test_cnn_defaults(self):
        cfg = CnnConfig()
        assert cfg.d2 == 525
        assert cfg.min_len == 6

    def test_lstm_defaults(self):
        cfg = LstmConfig()
        assert cfg.d2 == 200
        assert cfg.min_len == 0

    def test_cnn_mismatched_widths(self):
        with pytest.raises(ModelError):
            CnnConfig(widths=(1, 2), counts=(3,))

    def test_config_dict_roundtrip(self):
        for cfg in (CnnConfig(embed_dim=7, widths=(2, 3), counts=(4, 5)),
                    LstmConfig(embed_dim=9, hidden=11)):
            assert config_from_dict(cfg.to_dict()) == cfg

    def test_unknown_arch_in_dict(self):
        with pytest.raises(ModelFormatError):
            config_from_dict({"arch": "transformer"})

    def test_train_config_validation(self):
        with pytest.raises(ModelError):
            TrainConfig(batch_size=0)
        with pytest.raises(ModelError):
            TrainConfig(lr=-0.1)
        TrainConfig(lr=0.0)  # explicitly allowed


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


class TestInitParams:
    def test_cnn_shapes(self):
        cfg = CnnConfig(embed_dim=5, widths=(1, 3), counts=(4, 6))
        schema = DEFAULT_TOY_RULESET.schema()
        params = init_params("cnn", cfg, schema, 12, Rng(0))
        assert params["embedding"].shape == (12, 5)
        assert params["conv1:w"].shape == (5, 4)
        assert params["conv3:w"].shape == (15, 6)
        assert params["conv3:b"].shape == (6,)
        assert params["head:Number:w"].shape == (10, 3)

    def test_lstm_shapes(self):
        cfg = LstmConfig(embed_dim=5, hidden=7)
        schema = DEFAULT_TOY_RULESET.schema()
        params = init_params("bilstm", cfg, schema, 12, Rng(0))
        for d in ("fw", "bw"):
            assert params[f"{d}:wx"].shape == (5, 28)
            assert params[f"{d}:wh"].shape == (7, 28)
            assert params[f"{d}:b"].shape == (28,)
        assert params["head:Number:w"].shape == (14, 3)

    def test_embeddings_uniform_biases_zero(self):
        cfg = CnnConfig(embed_dim=20, widths=(2,), counts=(5,))
        params = init_params("cnn", cfg, DEFAULT_TOY_RULESET.schema(), 50,
                             Rng(1))
        emb = params["embedding"]
        assert emb.min() >= -0.01 and emb.max() < 0.01
        np.testing.assert_array_equal(params["conv2:b"], np.zeros(5))
        np.testing.assert_array_equal(params["head:Number:b"], np.zeros(3))

    def test_weight_matrices_orthogonal(self):
        cfg = CnnConfig(embed_dim=4, widths=(2,), counts=(3,))
        params = init_params("cnn", cfg, DEFAULT_TOY_RULESET.schema(), 10,
                             Rng(2))
        w = params["conv2:w"]  # (8, 3): columns orthonormal
        np.testing.assert_allclose(w.T @ w, np.eye(3), atol=1e-12)

    def test_deterministic(self):
        cfg = LstmConfig(embed_dim=3, hidden=4)
        schema = DEFAULT_TOY_RULESET.schema()
        a = init_params("bilstm", cfg, schema, 9, Rng(5))
        b = init_params("bilstm", cfg, schema, 9, Rng(5))
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


# ---------------------------------------------------------------------------
# CNN forward
# ---------------------------------------------------------------------------


class TestCnnForward:
    def test_width_one_matches_hand_computation(self):
        model = make_model("cnn", seed=3, widths=(1,), counts=(4,),
                           jitter=0.2)
        ids = model.encode("abca")
        fwd = cnn_forward(model, ids)
        X = model.params["embedding"][ids]
        z = X @ model.params["conv1:w"] + model.params["conv1:b"]
        c = np.maximum(z, 0.0)
        np.testing.assert_allclose(fwd.rep, c.max(axis=0), atol=1e-15)
        np.testing.assert_array_equal(fwd.argmax, c.argmax(axis=0))

    def test_multi_width_matches_hand_computation(self):
        model = make_model("cnn", seed=4, widths=(2, 3), counts=(3, 2),
                           jitter=0.2)
        ids = model.encode("dbeca")
        fwd = cnn_forward(model, ids)
        X = model.params["embedding"][ids]
        reps = []
        for n, cnt in zip((2, 3), (3, 2)):
            w = model.params[f"conv{n}:w"]
            b = model.params[f"conv{n}:b"]
            rows = [np.maximum(X[t:t + n].reshape(-1) @ w + b, 0.0)
                    for t in range(len(ids) - n + 1)]
            reps.append(np.max(rows, axis=0))
        np.testing.assert_allclose(fwd.rep, np.concatenate(reps), atol=1e-14)

    def test_ties_pick_first_window(self):
        """Zero weights give identical activations everywhere: argmax 0."""
        model = make_model("cnn", seed=5, widths=(2,), counts=(3,))
        for name in ("conv2:w", "conv2:b"):
            model.params[name] = np.zeros_like(model.params[name])
        fwd = cnn_forward(model, model.encode("abcd"))
        np.testing.assert_array_equal(fwd.argmax, np.zeros(3, dtype=int))

    def test_too_short_sequence_rejected(self):
        model = make_model("cnn", seed=6, widths=(1, 4), counts=(2, 2))
        with pytest.raises(ModelError, match="shorter than"):
            cnn_forward(model, [2, 4, 3])  # length 3 < widest filter 4

    def test_trained_argmax_avoids_pad_windows(self, cnn_model, toy_dataset):
        """Pooling must select content windows, never pure padding."""
        for s in toy_dataset.test:
            ids = cnn_model.encode(s.surface)
            fwd = cnn_forward(cnn_model, ids)
            off = 0
            for n, cnt in zip(cnn_model.config.widths,
                              cnn_model.config.counts):
                starts = fwd.argmax[off:off + cnt].astype(int)
                assert all(ids[t] != PAD_ID for t in starts)
                off += cnt


# ---------------------------------------------------------------------------
# BiLSTM forward
# ---------------------------------------------------------------------------


def hand_lstm(X, wx, wh, b, reverse):
    """Textbook (i, f, g, o) recurrence written independently of the model."""
    H = wh.shape[0]
    h = np.zeros(H)
    c = np.zeros(H)
    states = {}
    order = reversed(range(X.shape[0])) if reverse else range(X.shape[0])
    for t in order:
        z = X[t] @ wx + h @ wh + b
        i = 1.0 / (1.0 + np.exp(-z[:H]))
        f = 1.0 / (1.0 + np.exp(-z[H:2 * H]))
        g = np.tanh(z[2 * H:3 * H])
        o = 1.0 / (1.0 + np.exp(-z[3 * H:]))
        c = f * c + i * g
        h = o * np.tanh(c)
        states[t] = h
    return states


class TestBilstmForward:
    def test_matches_hand_recurrence(self):
        model = make_model("bilstm", seed=7, hidden=5, jitter=0.3)
        ids = model.encode("cabfe")
        fwd = bilstm_forward(model, ids)
        X = model.params["embedding"][ids]
        fw = hand_lstm(X, model.params["fw:wx"], model.params["fw:wh"],
                       model.params["fw:b"], reverse=False)
        bw = hand_lstm(X, model.params["bw:wx"], model.params["bw:wh"],
                       model.params["bw:b"], reverse=True)
        T = len(ids)
        np.testing.assert_allclose(fwd.h_fw[T - 1], fw[T - 1], atol=1e-14)
        np.testing.assert_allclose(fwd.h_bw[0], bw[0], atol=1e-14)
        np.testing.assert_allclose(fwd.rep,
                                   np.concatenate([fw[T - 1], bw[0]]),
                                   atol=1e-14)

    def test_representation_dimension(self):
        model = make_model("bilstm", seed=8, hidden=9)
        assert bilstm_forward(model, model.encode("ab")).rep.shape == (18,)

    def test_single_char_word(self):
        model = make_model("bilstm", seed=9, hidden=4)
        rep = bilstm_forward(model, model.encode("a")).rep
        assert np.all(np.isfinite(rep))


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class TestClassify:
    def test_distributions_sum_to_one(self):
        model = make_model("cnn", seed=10, jitter=0.5)
        probs = classify(model, model.representation(model.encode("abc")))
        for name, p in probs.items():
            assert p.shape == (3,)
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p > 0)

    def test_shift_invariance(self):
        """Adding a constant to a head's logits leaves softmax unchanged."""
        model = make_model("cnn", seed=11, jitter=0.5)
        rep = model.representation(model.encode("abc"))
        before = classify(model, rep)["Number"]
        model.params["head:Number:b"] = model.params["head:Number:b"] + 17.0
        after = classify(model, rep)["Number"]
        np.testing.assert_allclose(before, after, atol=1e-12)

    def test_stable_for_huge_logits(self):
        model = make_model("cnn", seed=12, jitter=0.5)
        model.params["head:Number:w"] = model.params["head:Number:w"] * 1e4
        probs = classify(model, model.representation(model.encode("abc")))
        assert np.all(np.isfinite(probs["Number"]))

    def test_wrong_rep_shape_rejected(self):
        model = make_model("cnn", seed=13)
        with pytest.raises(ModelError):
            classify(model, np.zeros(model.d2 + 1))

    def test_joint_loss_hand_value(self):
        logits = {"Number": np.array([0.0, 0.0]),
                  "Case": np.array([1.0, 1.0, 1.0])}
        gold = {"Number": 0, "Case": 2}
        assert joint_loss(logits, gold) == pytest.approx(
            np.log(2.0) + np.log(3.0))


class TestWordLoss:
    """The tape-built training loss must equal the plain forward loss."""

    @pytest.mark.parametrize("arch", ["cnn", "bilstm"])
    def test_matches_forward_pipeline(self, arch):
        model = make_model(arch, seed=14, jitter=0.3)
        ids = model.encode("fade")
        gold = {"Number": 1, "Case": 2}
        params = {k: Tensor(v, requires_grad=True)
                  for k, v in model.params.items()}
        loss = word_loss(params, arch, model.config, ids, gold, model.schema)
        rep = model.representation(ids)
        logits = {name: rep @ model.head(name)[0] + model.head(name)[1]
                  for name in model.schema.class_names}
        assert float(loss.data) == pytest.approx(joint_loss(logits, gold),
                                                 rel=1e-12)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def tiny_dataset():
    schema = DEFAULT_TOY_RULESET.schema()
    mk = lambda s, v: WordSample(s, schema.complete({"Number": v}))
    train_s = [mk("bba", "Sing"), mk("bcs", "Plur"), mk("dda", "Sing"),
               mk("dds", "Plur"), mk("bdda", "Sing"), mk("ddbs", "Plur")]
    valid_s = [mk("bda", "Sing"), mk("dbs", "Plur")]
    return Dataset.build(schema, train_s, valid_s)


TINY_CNN = CnnConfig(embed_dim=6, widths=(1, 2), counts=(4, 4))


class TestTrain:
    def test_unknown_arch(self):
        with pytest.raises(ModelError):
            train("rnn", tiny_dataset(), TrainConfig())

    def test_deterministic(self):
        ds = tiny_dataset()
        cfg = TrainConfig(lr=3e-3, max_epochs=3, patience=9, seed=2)
        m1, h1 = train("cnn", ds, cfg, TINY_CNN)
        m2, h2 = train("cnn", ds, cfg, TINY_CNN)
        assert h1 == h2
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k], m2.params[k])

    def test_zero_lr_returns_initial_weights(self):
        ds = tiny_dataset()
        model, _ = train("cnn", ds,
                         TrainConfig(lr=0.0, max_epochs=2, patience=9,
                                     seed=4), TINY_CNN)
        ref = init_params("cnn", TINY_CNN, ds.schema, ds.vocab.size,
                          Rng(4).split("init"))
        for k in ref:
            np.testing.assert_array_equal(model.params[k], ref[k])

    def test_divergence_raises(self):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged):
                train("cnn", tiny_dataset(),
                      TrainConfig(lr=1e150, max_epochs=4, patience=9,
                                  seed=1), TINY_CNN)

    def test_unk_substitution_changes_training(self):
        """With a singleton character present, the substitution path must
        actually perturb the learned weights."""
        ds = tiny_dataset()
        assert ds.vocab.is_singleton("c")
        base = TrainConfig(lr=1e-2, max_epochs=3, patience=9, seed=2,
                           unk_substitution_prob=0.0)
        subst = TrainConfig(lr=1e-2, max_epochs=3, patience=9, seed=2,
                            unk_substitution_prob=1.0)
        m1, _ = train("cnn", ds, base, TINY_CNN)
        m2, _ = train("cnn", ds, subst, TINY_CNN)
        assert any(not np.array_equal(m1.params[k], m2.params[k])
                   for k in m1.params)

    def test_history_epochs_sequential(self, cnn_model, toy_dataset):
        model, history = train("cnn", toy_dataset,
                               TrainConfig(lr=3e-3, max_epochs=4, patience=9,
                                           seed=5), TINY_CNN)
        assert [r.epoch for r in history] == list(range(1, len(history) + 1))
        assert all(np.isfinite(r.train_loss) for r in history)

    def test_fixture_model_learned_the_rule(self, cnn_model, toy_dataset):
        report = evaluate_accuracy(cnn_model, toy_dataset.test)
        assert report.per_class["Number"] >= 0.95
        assert report.average > report.majority_average


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class TestEvaluate:
    def test_majority_vote(self):
        schema = DEFAULT_TOY_RULESET.schema()
        mk = lambda v: WordSample(f"w{v}", schema.complete({"Number": v}))
        samples = [mk("Sing"), WordSample("x", schema.complete(
            {"Number": "Sing"})), mk("Plur")]
        assert majority_vote_labels(samples, schema)["Number"] == "Sing"

    def test_majority_tie_resolved_by_schema_order(self):
        schema = DEFAULT_TOY_RULESET.schema()
        samples = [WordSample("a", schema.complete({"Number": "Sing"})),
                   WordSample("b", schema.complete({"Number": "Plur"}))]
        # Sing and Plur tie at one each; Sing comes first in the schema
        assert majority_vote_labels(samples, schema)["Number"] == "Sing"

    def test_missing_class_rejected(self, cnn_model):
        broken = WordSample("zzz", {"Wrong": "x"})
        with pytest.raises(ModelError):
            evaluate_accuracy(cnn_model, [broken])

    def test_report_counts(self, cnn_model, toy_dataset):
        report = evaluate_accuracy(cnn_model, toy_dataset.test)
        assert report.n_words == len(toy_dataset.test)
        assert 0.0 <= report.majority_average <= 1.0
        assert set(report.per_class) == set(cnn_model.schema.class_names)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class TestSerialization:
    def test_roundtrip(self, cnn_model, tmp_path):
        path = tmp_path / "m.chcd"
        save_model(cnn_model, path)
        back = load_model(path)
        assert back.arch == cnn_model.arch
        assert back.config == cnn_model.config
        assert back.schema == cnn_model.schema
        assert back.vocab == cnn_model.vocab
        assert back.majority == cnn_model.majority
        for k in cnn_model.params:
            np.testing.assert_array_equal(back.params[k],
                                          cnn_model.params[k])

    def test_lstm_roundtrip_predicts_identically(self, lstm_model, tmp_path):
        path = tmp_path / "m.chcd"
        save_model(lstm_model, path)
        back = load_model(path)
        for word in ("gakka", "dns", "bbbba"):
            assert back.predict(word) == lstm_model.predict(word)

    def test_resave_is_byte_identical(self, cnn_model, tmp_path):
        p1, p2 = tmp_path / "a.chcd", tmp_path / "b.chcd"
        save_model(cnn_model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, cnn_model, tmp_path):
        path = tmp_path / "m.chcd"
        save_model(cnn_model, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_corrupted_payload(self, cnn_model, tmp_path):
        path = tmp_path / "m.chcd"
        save_model(cnn_model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="checksum"):
            load_model(path)

    def test_unsupported_version(self, cnn_model, tmp_path):
        import hashlib

        path = tmp_path / "m.chcd"
        save_model(cnn_model, path)
        body = bytearray(path.read_bytes()[:-32])
        body[4:8] = struct.pack("<I", 99)
        blob = bytes(body) + hashlib.sha256(bytes(body)).digest()
        path.write_bytes(blob)
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.chcd"
        path.write_bytes(b"CHCD")
        with pytest.raises(ModelFormatError):
            load_model(path)


# ---------------------------------------------------------------------------
# Misc model API
# ---------------------------------------------------------------------------


class TestTaggerModel:
    def test_encode_honors_min_len(self):
        model = make_model("cnn", seed=15, widths=(1, 5), counts=(2, 2))
        ids = model.encode("ab")
        assert len(ids) == 5  # ^ a b $ pad
        assert ids[-1] == PAD_ID

    def test_predict_returns_schema_labels(self, cnn_model):
        pred = cnn_model.predict("gakka")
        for name, value in pred.items():
            assert value in cnn_model.schema.labels(name)

    def test_random_words_predict_without_error(self, lstm_model, rng):
        for _ in range(10):
            word = random_word(rng, chars="bcdfghjklmnas", lo=1, hi=14)
            lstm_model.predict(word)

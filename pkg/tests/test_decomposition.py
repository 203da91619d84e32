"""Relevant/irrelevant splitting: the linearization operator and the exact
decomposition of both architectures.

The load-bearing properties: shares telescope to f(total) - f(0), the hand
case comes out exactly, beta + gamma reproduces the forward representation
to float precision, and an empty relevance set yields beta identically zero.
"""

import itertools
import math

import numpy as np
import pytest
from conftest import make_model, random_index_set, random_word
from hypothesis import given, settings
from hypothesis import strategies as st

from charcd.autodiff import Rng
from charcd.corpus import PAD_ID
from charcd.decomposition import (
    DecompositionError,
    MAX_LINEARIZE_PARTS,
    ClassContribution,
    class_contribution,
    cd_cnn,
    cd_lstm,
    cnn_kernel_context,
    conv_preactivation_split,
    decompose,
    linearize_activation,
    lstm_kernel_context,
    relevance_mask,
    validate_index_set,
)
from charcd.models import bilstm_forward, cnn_forward


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def oracle_shares(parts, f):
    """Scalar permutation-average oracle, written without numpy arrays."""
    n = len(parts)
    acc = [0.0] * n
    for perm in itertools.permutations(range(n)):
        prefix = 0.0
        for k in perm:
            nxt = prefix + parts[k]
            acc[k] += f(nxt) - f(prefix)
            prefix = nxt
    fact = math.factorial(n)
    return [a / fact for a in acc]


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------


class TestLinearization:
    def test_hand_case(self):
        shares = linearize_activation([2.0, -3.0, 0.5], relu)
        assert [float(s) for s in shares] == [1.0, -1.25, 0.25]

    def test_matches_scalar_oracle_bitwise(self):
        rng = Rng(101)
        for _ in range(200):
            parts = [float(v) for v in rng.normal((3,), scale=2.0)]
            ours = [float(s) for s in linearize_activation(parts, relu)]
            assert ours == oracle_shares(parts, lambda x: max(x, 0.0))

    def test_single_part_is_the_whole_difference(self):
        (share,) = linearize_activation([1.7], np.tanh)
        assert float(share) == np.tanh(1.7) - np.tanh(0.0)

    @given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1,
                    max_size=5))
    @settings(max_examples=200, deadline=None)
    def test_shares_telescope_relu(self, parts):
        shares = linearize_activation(parts, relu)
        total = float(sum(parts))
        assert float(sum(shares)) == pytest.approx(
            float(relu(np.float64(total))) - 0.0, abs=1e-9)

    @given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1,
                    max_size=5))
    @settings(max_examples=200, deadline=None)
    def test_shares_telescope_sigmoid(self, parts):
        """sigma(0) = 0.5, so the telescoped total subtracts it."""
        shares = linearize_activation(parts, sigmoid)
        total = np.float64(sum(parts))
        assert float(sum(shares)) == pytest.approx(
            float(sigmoid(total)) - 0.5, abs=1e-9)

    def test_zero_part_gets_exact_zero(self):
        shares = linearize_activation([1.3, 0.0, -0.8], np.tanh)
        assert float(shares[1]) == 0.0

    def test_equal_parts_get_equal_shares(self):
        a, b, c = linearize_activation([0.7, 0.7, -0.4], relu)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_array_parts_broadcast(self):
        parts = [np.array([1.0, -2.0]), np.array([0.5, 0.5]), 0.25]
        shares = linearize_activation(parts, relu)
        assert all(s.shape == (2,) for s in shares)
        total = parts[0] + parts[1] + 0.25
        np.testing.assert_allclose(sum(shares), relu(total), atol=1e-12)

    def test_rejects_empty(self):
        with pytest.raises(DecompositionError):
            linearize_activation([], relu)

    def test_rejects_too_many_parts(self):
        parts = [0.1] * (MAX_LINEARIZE_PARTS + 1)
        with pytest.raises(DecompositionError, match="orderings"):
            linearize_activation(parts, relu)


# ---------------------------------------------------------------------------
# Index-set validation
# ---------------------------------------------------------------------------


class TestValidateIndexSet:
    def test_accepts_python_and_numpy_ints(self):
        ids = [2, 5, 6, 3]
        s = validate_index_set({1, np.int64(2)}, ids)
        assert s == frozenset({1, 2})

    def test_rejects_non_integer(self):
        with pytest.raises(DecompositionError, match="not an integer"):
            validate_index_set({1.5}, [2, 5, 3])

    def test_rejects_out_of_range(self):
        with pytest.raises(DecompositionError, match="outside"):
            validate_index_set({7}, [2, 5, 3])
        with pytest.raises(DecompositionError, match="outside"):
            validate_index_set({-1}, [2, 5, 3])

    def test_rejects_pad_positions(self):
        ids = [2, 5, 3, PAD_ID]
        with pytest.raises(DecompositionError, match="padding"):
            validate_index_set({3}, ids)

    def test_relevance_mask(self):
        mask = relevance_mask({0, 2}, 4)
        np.testing.assert_array_equal(mask, [True, False, True, False])


# ---------------------------------------------------------------------------
# Exactness of the full decomposition
# ---------------------------------------------------------------------------


class TestCnnDecomposition:
    def test_beta_plus_gamma_reproduces_forward(self):
        rng = Rng(7)
        for trial in range(25):
            model = make_model("cnn", seed=trial, jitter=0.3)
            word = random_word(rng, lo=3, hi=9)
            ids = model.encode(word)
            s = random_index_set(rng, ids)
            d = cd_cnn(model, ids, s)
            rep = cnn_forward(model, ids).rep
            np.testing.assert_allclose(d.beta + d.gamma, rep, atol=1e-12,
                                       rtol=0)
            np.testing.assert_allclose(d.total, rep, atol=1e-12, rtol=0)

    def test_empty_set_gives_exactly_zero_beta(self):
        model = make_model("cnn", seed=42, jitter=0.3)
        ids = model.encode("fgabc")
        d = cd_cnn(model, ids, frozenset())
        assert np.all(d.beta == 0.0)

    def test_full_set_puts_bias_in_gamma(self):
        """Even with every character relevant, bias stays irrelevant,
        so gamma is only zero when all biases are."""
        model = make_model("cnn", seed=43)  # zero biases from init
        ids = model.encode("abcde")
        d = cd_cnn(model, ids, set(range(len(ids))))
        np.testing.assert_allclose(d.gamma, np.zeros_like(d.gamma),
                                   atol=1e-15)

    def test_preactivation_split_is_additive(self):
        """beta(S) + beta(complement) covers every window dot product."""
        model = make_model("cnn", seed=44, jitter=0.4)
        ids = model.encode("beadf")
        fwd = cnn_forward(model, ids)
        mask = relevance_mask({1, 3}, len(ids))
        s1 = conv_preactivation_split(model, fwd, mask)
        s2 = conv_preactivation_split(model, fwd, ~mask)
        total = s1.win_contrib.sum(axis=1)
        np.testing.assert_allclose(s1.beta + s2.beta, total, atol=1e-12)
        np.testing.assert_allclose(s1.beta, s2.gamma, atol=1e-15)

    def test_relevant_character_moves_beta(self):
        model = make_model("cnn", seed=45, jitter=0.4)
        ids = model.encode("abca")
        d1 = cd_cnn(model, ids, {1})
        d2 = cd_cnn(model, ids, {2})
        assert not np.allclose(d1.beta, d2.beta)


class TestLstmDecomposition:
    def test_beta_plus_gamma_reproduces_forward(self):
        rng = Rng(8)
        for trial in range(12):
            model = make_model("bilstm", seed=trial, hidden=5, jitter=0.3)
            word = random_word(rng, lo=1, hi=8)
            ids = model.encode(word)
            s = random_index_set(rng, ids)
            d = cd_lstm(model, ids, s)
            rep = bilstm_forward(model, ids).rep
            np.testing.assert_allclose(d.beta + d.gamma, rep, atol=1e-12,
                                       rtol=0)

    def test_empty_set_gives_exactly_zero_beta(self):
        model = make_model("bilstm", seed=50, hidden=6, jitter=0.3)
        ids = model.encode("dgac")
        d = cd_lstm(model, ids, frozenset())
        assert np.all(d.beta == 0.0)

    def test_both_directions_carry_relevance(self):
        """A relevant character must shape both the forward half and the
        backward half of the representation."""
        model = make_model("bilstm", seed=51, hidden=5, jitter=0.3)
        ids = model.encode("abcd")
        d = cd_lstm(model, ids, {2})
        H = model.config.hidden
        assert np.any(d.beta[:H] != 0.0)
        assert np.any(d.beta[H:] != 0.0)


class TestDispatch:
    def test_decompose_routes_by_arch(self):
        cnn = make_model("cnn", seed=52, jitter=0.2)
        ids = cnn.encode("abc")
        np.testing.assert_array_equal(decompose(cnn, ids, {1}).beta,
                                      cd_cnn(cnn, ids, {1}).beta)

    def test_unknown_arch_rejected(self):
        model = make_model("cnn", seed=53)
        model.arch = "gru"
        with pytest.raises(DecompositionError, match="unknown architecture"):
            decompose(model, model.encode("abc"), set())


# ---------------------------------------------------------------------------
# Head-level contributions
# ---------------------------------------------------------------------------


class TestClassContribution:
    @pytest.mark.parametrize("arch", ["cnn", "bilstm"])
    def test_logit_identity(self, arch):
        model = make_model(arch, seed=54, jitter=0.3)
        ids = model.encode("cdefa")
        contrib = class_contribution(model, ids, {1, 2}, "Number")
        np.testing.assert_allclose(
            contrib.relevant + contrib.irrelevant + contrib.bias,
            contrib.logits, atol=1e-10, rtol=0)
        assert np.abs(contrib.residual).max() < 1e-10

    def test_score_selects_label_column(self):
        model = make_model("cnn", seed=55, jitter=0.3)
        ids = model.encode("abc")
        contrib = class_contribution(model, ids, {1}, "Case")
        assert contrib.score("Gen") == float(
            contrib.relevant[contrib.labels.index("Gen")])

    def test_unknown_class_rejected(self):
        model = make_model("cnn", seed=56)
        with pytest.raises(DecompositionError, match="unknown feature class"):
            class_contribution(model, model.encode("abc"), {1}, "Tense")

    def test_empty_set_scores_zero(self):
        model = make_model("cnn", seed=57, jitter=0.3)
        ids = model.encode("abcd")
        contrib = class_contribution(model, ids, frozenset(), "Number")
        np.testing.assert_array_equal(contrib.relevant,
                                      np.zeros_like(contrib.relevant))

    def test_trained_model_identity(self, cnn_model, lstm_model):
        for model in (cnn_model, lstm_model):
            ids = model.encode("gakka")
            contrib = class_contribution(model, ids, {5}, "Number")
            assert isinstance(contrib, ClassContribution)
            assert np.abs(contrib.residual).max() < 1e-10


# ---------------------------------------------------------------------------
# Kernel contexts
# ---------------------------------------------------------------------------


class TestKernelContexts:
    def test_cnn_context_shapes_and_total(self):
        model = make_model("cnn", seed=58, jitter=0.3)
        ids = model.encode("badc")
        ctx = cnn_kernel_context(model, ids)
        d2 = model.d2
        max_w = max(model.config.widths)
        assert ctx.win_pos.shape == (d2, max_w)
        assert ctx.win_pos.dtype == np.int32
        assert ctx.win_contrib.shape == (d2, max_w)
        np.testing.assert_allclose(ctx.total, ctx.win_contrib.sum(axis=1),
                                   atol=1e-15)
        # unused slots of narrow filters are -1
        assert (ctx.win_pos[0, 1:] == -1).all()

    def test_cnn_context_consistent_with_forward(self):
        model = make_model("cnn", seed=59, jitter=0.3)
        ids = model.encode("badc")
        ctx = cnn_kernel_context(model, ids)
        rep = cnn_forward(model, ids).rep
        np.testing.assert_allclose(np.maximum(ctx.total + ctx.bias, 0.0),
                                   rep, atol=1e-12)

    def test_lstm_context_shapes(self):
        model = make_model("bilstm", seed=60, hidden=5)
        ids = model.encode("abc")
        ctx = lstm_kernel_context(model, ids)
        H = model.config.hidden
        assert ctx.xw_fw.shape == (len(ids), 4 * H)
        assert ctx.wh_bw.shape == (H, 4 * H)
        assert ctx.hidden == H and ctx.seq_len == len(ids)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idld import autograd as ag
from idld.autograd import Tensor, backward
from idld.errors import ContractViolation
from idld.gating import (
    random_gates_bernoulli,
    random_gates_exact,
    sample_k,
    selector_forward,
    threshold_binarize,
    topk_binarize,
)
from idld.layers import SelectorParams

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
score_vectors = st.integers(1, 12).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def selector(rng, d=4, N=5, width=3, C=6, P=3):
    return SelectorParams(d, N, rng, kernel_width=width, channels=C, pooled_len=P)


class TestSelector:
    def test_zero_params_give_zero_scores(self, rng):
        p = selector(rng)
        for t in p.parameters():
            t.data = np.zeros_like(t.data)
        np.testing.assert_array_equal(selector_forward(Tensor(rng.normal(size=(7, 4))), p).data, 0.0)

    @pytest.mark.parametrize("T", [1, 7, 50])
    def test_output_length_fixed(self, T, rng):
        p = selector(rng)
        assert selector_forward(Tensor(rng.normal(size=(T, 4))), p).shape == (5,)

    def test_hand_computed_pipeline(self, rng):
        p = SelectorParams(2, 2, rng, kernel_width=1, channels=1, pooled_len=1)
        p.norm.scale.data, p.norm.shift.data = np.ones(2), np.zeros(2)
        p.kernel.data = np.array([[[0.7], [-0.2]]])
        p.conv_bias.data = np.array([0.1])
        p.proj.data = np.array([[1.5, -2.0]])
        p.proj_bias.data = np.array([0.3, 0.0])
        X = np.array([[1.0, 3.0], [2.0, -2.0]])
        # row means 2 and 0, variances 1 and 4
        s1, s2 = 1.0 / math.sqrt(1.0 + 1e-5), 2.0 / math.sqrt(4.0 + 1e-5)
        normed = np.array([[-s1, s1], [s2, -s2]])
        conv = normed @ np.array([0.7, -0.2]) + 0.1
        gelu = [0.5 * c * (1 + math.tanh(math.sqrt(2 / math.pi) * (c + 0.044715 * c ** 3))) for c in conv]
        pooled = sum(gelu) / 2
        expected = [pooled * 1.5 + 0.3, pooled * -2.0]
        np.testing.assert_allclose(selector_forward(Tensor(X), p).data, expected, rtol=1e-13)

    def test_padded_rows_ignored(self, rng):
        p = selector(rng)
        x = rng.normal(size=(9, 4))
        y = x.copy()
        y[6:] = 1e3
        batch = np.stack([x, y])
        G = selector_forward(Tensor(batch), p, valid_len=np.array([6, 6])).data
        np.testing.assert_allclose(G[0], G[1], rtol=0, atol=1e-13)
        np.testing.assert_allclose(G[0], selector_forward(Tensor(x[:6]), p).data, atol=1e-13)

    def test_gradient_end_to_end(self, rng):
        p = selector(rng)
        w = rng.normal(size=5)
        err = ag.finite_diff_check(lambda x: (selector_forward(x, p) * w).sum(), Tensor(rng.normal(size=(6, 4))))
        assert err <= 1e-4


class TestTopK:
    def test_examples(self):
        np.testing.assert_array_equal(topk_binarize(np.array([0.9, 0.1, 0.5]), 2).bits, [1, 0, 1])
        np.testing.assert_array_equal(topk_binarize(np.array([0.5, 0.5, 0.1]), 1).bits, [1, 0, 0])

    def test_k_equals_n_all_ones(self, rng):
        np.testing.assert_array_equal(topk_binarize(rng.normal(size=6), 6).bits, 1)

    def test_out_of_range(self):
        for k in (0, 4):
            with pytest.raises(ContractViolation):
                topk_binarize(np.zeros(3), k)

    @given(score_vectors, st.data())
    def test_popcount_equals_k(self, G, data):
        k = data.draw(st.integers(1, len(G)))
        mask = topk_binarize(G, k)
        assert mask.bits.sum() == k
        assert set(np.unique(mask.gates.data)) <= {0.0, 1.0}

    @given(score_vectors, st.data(), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, G, data, c):
        G = np.round(G, 3)  # keep G + c exact in binary so ties stay ties
        k = data.draw(st.integers(1, len(G)))
        np.testing.assert_array_equal(topk_binarize(G + np.round(c), k).bits, topk_binarize(G, k).bits)

    @given(score_vectors, st.data())
    def test_selected_dominate_unselected(self, G, data):
        k = data.draw(st.integers(1, len(G)))
        bits = topk_binarize(G, k).bits.astype(bool)
        if (~bits).any():
            assert G[bits].min() >= G[~bits].max()

    def test_batched_rows_independent(self, rng):
        G = rng.normal(size=(4, 6))
        mask = topk_binarize(Tensor(G), 3)
        for b in range(4):
            np.testing.assert_array_equal(mask.bits[b], topk_binarize(G[b], 3).bits)

    def test_straight_through_gradient(self, rng):
        G = Tensor(rng.normal(size=5), requires_grad=True)
        mask = topk_binarize(G, 2)
        upstream = rng.normal(size=5)
        backward((mask.gates * upstream).sum())
        np.testing.assert_array_equal(G.grad, upstream * mask.bits)

    def test_straight_through_equals_literal_multiplier(self, rng):
        # the selected score receives what a literal gate multiplier on the branch would
        y, branch = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        w = rng.normal(size=(3, 2))
        G = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        g = topk_binarize(G, 1).gates[0]
        backward(((Tensor(y) + g * Tensor(branch)) * w).sum())
        literal = Tensor(np.array(1.0), requires_grad=True)
        backward(((Tensor(y) + literal * Tensor(branch)) * w).sum())
        assert G.grad[0] == literal.grad
        assert G.grad[1] == 0.0


class TestThreshold:
    def test_examples(self):
        G = np.array([0.2, -0.3, 0.4])
        np.testing.assert_array_equal(threshold_binarize(G, -np.inf).bits, 1)
        np.testing.assert_array_equal(threshold_binarize(G, 0.0).bits, [1, 0, 1])
        np.testing.assert_array_equal(threshold_binarize(G, np.inf).bits, [0, 0, 1])

    @given(score_vectors, st.lists(finite, min_size=2, max_size=6))
    def test_inclusion_monotone(self, G, gammas):
        gammas = sorted(gammas)
        raw = [(G > g).astype(int) for g in gammas]
        fallback = [threshold_binarize(G, g).bits for g in gammas]
        for lo, hi in zip(raw, raw[1:]):
            assert (lo >= hi).all()
        for lo, hi in zip(fallback, fallback[1:]):
            assert lo.sum() >= hi.sum()
            assert lo.sum() >= 1

    def test_fallback_never_empty_in_batch(self, rng):
        mask = threshold_binarize(Tensor(rng.normal(size=(5, 4))), 10.0)
        np.testing.assert_array_equal(mask.bits.sum(axis=1), 1)


class TestSampleK:
    def test_single_layer(self, rng):
        assert {sample_k(1, rng) for _ in range(50)} == {1}

    def test_mean_and_support(self):
        r = np.random.default_rng(0)
        ks = np.array([sample_k(12, r) for _ in range(100_000)])
        sigma = math.sqrt((12 ** 2 - 1) / 12 / len(ks))
        assert abs(ks.mean() - 6.5) <= 3 * sigma
        assert set(ks) == set(range(1, 13))


class TestRandomGates:
    def test_bernoulli_extremes(self, rng):
        np.testing.assert_array_equal(random_gates_bernoulli(6, 0.0, rng).bits, 1)
        for _ in range(20):
            assert random_gates_bernoulli(6, 1.0, rng).bits.sum() == 1

    def test_bernoulli_mean_drop(self):
        r = np.random.default_rng(1)
        dropped = np.array([12 - random_gates_bernoulli(12, 0.5, r).bits.sum() for _ in range(100_000)])
        sigma = math.sqrt(12 * 0.25 / len(dropped))
        # forcing one layer back on when all 12 drop shifts the mean by 2**-12
        assert abs(dropped.mean() - (6 - 2 ** -12)) <= 3 * sigma

    def test_bernoulli_invalid(self, rng):
        with pytest.raises(ContractViolation):
            random_gates_bernoulli(3, 1.5, rng)

    def test_exact_counts(self, rng):
        np.testing.assert_array_equal(random_gates_exact(5, 0, rng).bits, 1)
        for _ in range(50):
            assert random_gates_exact(4, 2, rng).bits.sum() == 2

    def test_exact_single_survivor_uniform(self):
        r = np.random.default_rng(2)
        N, draws = 6, 10_000
        pos = np.array([np.flatnonzero(random_gates_exact(N, N - 1, r).bits)[0] for _ in range(draws)])
        counts = np.bincount(pos, minlength=N)
        chi2 = ((counts - draws / N) ** 2 / (draws / N)).sum()
        assert chi2 < 20.52  # 0.999 quantile of chi-square with 5 dof

    def test_exact_invalid(self, rng):
        with pytest.raises(ContractViolation):
            random_gates_exact(4, 4, rng)

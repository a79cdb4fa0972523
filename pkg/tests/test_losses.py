import math
import warnings

import numpy as np
import pytest

from idld import autograd as ag
from idld.autograd import Tensor, backward, finite_diff_check
from idld.errors import ContractViolation, InfeasibleAlignmentWarning
from idld.losses import (
    ctc_forward_backward,
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_batch,
    ctc_min_length,
    cross_entropy,
    ee_joint_loss,
)
from oracles import collapse, ctc_brute_force, random_log_probs


class TestCtc:
    def test_single_frame(self):
        eps = 1e-3
        lp = np.log([[eps, 1 - eps]])
        assert ctc_loss(lp, [1]).item() == pytest.approx(-math.log(1 - eps), rel=1e-14)

    def test_two_uniform_frames(self):
        lp = np.log(np.full((2, 2), 0.5))
        assert ctc_loss(lp, [1]).item() == pytest.approx(-math.log(0.75), rel=1e-14)

    def test_empty_target_is_all_blank(self, rng):
        lp = random_log_probs(rng, 5, 3)
        assert ctc_loss(lp, []).item() == pytest.approx(-lp[:, 0].sum(), rel=1e-14)

    def test_matches_enumeration(self, rng):
        for _ in range(50):
            T, V = int(rng.integers(1, 6)), int(rng.integers(2, 4))
            L = int(rng.integers(0, min(3, T) + 1))
            target = [int(s) for s in rng.integers(1, V, size=L)]
            lp = random_log_probs(rng, T, V)
            expected = ctc_brute_force(lp, target)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", InfeasibleAlignmentWarning)
                got = ctc_loss(lp, target).item()
            if math.isinf(expected):
                assert math.isinf(got) and got > 0
            else:
                assert abs(got - expected) <= 1e-9

    def test_gradient_four_by_three(self, rng):
        lp0 = random_log_probs(rng, 4, 3)
        assert finite_diff_check(lambda lp: ctc_loss(lp, [1, 2]), Tensor(lp0)) <= 1e-4

    def test_gradient_through_log_softmax_batch(self, rng):
        z0 = rng.normal(size=(2, 5, 4))
        targets, lengths = [[1, 1], [2, 3, 1]], [5, 4]
        err = finite_diff_check(lambda z: ctc_loss_batch(ag.log_softmax(z, axis=-1), targets, lengths), Tensor(z0))
        assert err <= 1e-4

    def test_infeasible_is_flagged_inf(self, rng):
        lp = random_log_probs(rng, 2, 3)
        assert ctc_min_length([1, 1]) == 3
        with pytest.warns(InfeasibleAlignmentWarning):
            loss = ctc_loss(lp, [1, 1])
        assert loss.item() == math.inf
        g = Tensor(lp, requires_grad=True)
        with pytest.warns(InfeasibleAlignmentWarning):
            backward(ctc_loss(g, [1, 1]))
        assert np.isfinite(g.grad).all() and not g.grad.any()

    def test_frames_past_input_length_ignored(self, rng):
        lp = random_log_probs(rng, 6, 3)
        other = lp.copy()
        other[4:] = random_log_probs(rng, 2, 3)
        a = ctc_loss(lp, [2, 1], input_length=4).item()
        b = ctc_loss(other, [2, 1], input_length=4).item()
        assert a == b
        assert a == pytest.approx(ctc_loss(lp[:4], [2, 1]).item(), rel=1e-14)

    def test_likelihood_in_unit_interval(self, rng):
        for _ in range(30):
            lp = random_log_probs(rng, 5, 3)
            p = math.exp(-ctc_loss(lp, [1, 2]).item())
            assert 0.0 < p <= 1.0

    def test_batch_is_mean_over_utterances(self, rng):
        lp = np.stack([random_log_probs(rng, 5, 4) for _ in range(3)])
        targets, lengths = [[1], [2, 3], [3, 3]], [5, 3, 4]
        singles = [ctc_loss(lp[b], targets[b], lengths[b]).item() for b in range(3)]
        assert ctc_loss_batch(lp, targets, lengths).item() == pytest.approx(np.mean(singles), rel=1e-14)

    def test_gradient_matches_posterior_identity(self, rng):
        # occupation probabilities per frame sum to one, so d(nll)/d(lp) sums to -1 per frame
        lp = random_log_probs(rng, 6, 4)[None]
        _, grad, _ = ctc_forward_backward(lp, [[1, 3, 2]], [6])
        np.testing.assert_allclose(grad[0].sum(axis=1), -1.0, atol=1e-12)

    def test_blank_in_target_rejected(self, rng):
        with pytest.raises(ContractViolation):
            ctc_loss(random_log_probs(rng, 3, 3), [0, 1])


class TestGreedy:
    def test_collapse_then_remove(self):
        a, b = 1, 2
        lp = np.log(np.eye(3)[[a, a, 0, a, b]] * 0.9 + 0.1 / 3)
        assert ctc_greedy_decode(lp) == [a, a, b]

    def test_all_blank(self):
        assert ctc_greedy_decode(np.log(np.eye(3)[[0, 0, 0]] + 1e-3)) == []

    def test_random_grid_matches_rule(self, rng):
        for _ in range(20):
            lp = random_log_probs(rng, 6, 3)
            assert ctc_greedy_decode(lp) == collapse(lp.argmax(axis=1))

    def test_input_length(self, rng):
        lp = random_log_probs(rng, 6, 3)
        assert ctc_greedy_decode(lp, 3) == collapse(lp[:3].argmax(axis=1))


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros(7), 3).item() == pytest.approx(math.log(7), rel=1e-15)

    def test_saturated(self):
        assert cross_entropy(np.array([0.0, 50.0, 0.0]), 1).item() < 1e-20

    def test_hand_value(self):
        expected = -math.log(math.e ** 3 / (math.e + math.e ** 2 + math.e ** 3))
        assert cross_entropy(np.array([1.0, 2.0, 3.0]), 2).item() == pytest.approx(expected, rel=1e-14)

    def test_out_of_range(self):
        with pytest.raises(ContractViolation):
            cross_entropy(np.zeros(3), 3)
        with pytest.raises(ContractViolation):
            cross_entropy(np.zeros(3), -1)

    def test_gradient(self, rng):
        assert finite_diff_check(lambda z: cross_entropy(z, [0, 2, 1]), Tensor(rng.normal(size=(3, 4)))) <= 1e-4


class TestJointLoss:
    def test_equal_exits(self):
        assert ee_joint_loss([2.5, 2.5, 2.5]).item() == 2.5

    def test_mean(self):
        assert ee_joint_loss([0.0, 2.0]).item() == 1.0

    def test_infinite_flagged(self):
        with pytest.warns(InfeasibleAlignmentWarning):
            assert ee_joint_loss([1.0, math.inf]).item() == math.inf

    def test_shared_parameter_gradient_is_mean(self, rng):
        # two exits reading a shared weight w: exit1 = sum(tanh(w x)), exit2 = sum((w x)^2)
        x = rng.normal(size=3)
        w0 = rng.normal(size=3)

        def exits(w):
            h = w * Tensor(x)
            return [ag.tanh(h).sum(), (h * h).sum()]

        w = Tensor(w0, requires_grad=True)
        backward(ee_joint_loss(exits(w)))
        per_exit = []
        for j in range(2):
            wj = Tensor(w0, requires_grad=True)
            backward(exits(wj)[j])
            per_exit.append(wj.grad)
        np.testing.assert_allclose(w.grad, np.mean(per_exit, axis=0), rtol=1e-14)
        assert finite_diff_check(lambda v: ee_joint_loss(exits(v)), Tensor(w0)) <= 1e-4

    def test_weighted(self):
        assert ee_joint_loss([1.0, 3.0], weights=[1.0, 3.0]).item() == pytest.approx(2.5)
        with pytest.raises(ContractViolation):
            ee_joint_loss([1.0, 3.0], weights=[1.0])

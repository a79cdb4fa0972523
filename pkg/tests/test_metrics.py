import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from idld.errors import ContractViolation
from idld.metrics import (
    REPORT_HEADER,
    accuracy,
    avg_entropy,
    corpus_wer,
    edit_distance,
    entropy_rows,
    macs_per_layer,
    report_row,
    reports_to_csv,
    sample_macs,
    word_error_rate,
)
from idld.model import ForwardTrace, ModelConfig, SelectorConfig
from oracles import edit_distance_brute


class TestWer:
    def test_single_substitution(self):
        assert word_error_rate("a b c", "a x c") == pytest.approx(1 / 3, abs=1e-12)

    def test_identity_and_deletion(self):
        assert word_error_rate("a b c", "a b c") == 0.0
        assert word_error_rate("a b c", "") == 1.0
        assert word_error_rate(["a"], ["b", "c", "d"]) == 3.0

    def test_empty_reference(self):
        with pytest.raises(ContractViolation):
            word_error_rate([], ["a"])

    @given(st.lists(st.integers(0, 2), max_size=6), st.lists(st.integers(0, 2), max_size=6))
    def test_matches_shortest_edit_script(self, ref, hyp):
        assert edit_distance(ref, hyp) == edit_distance_brute(ref, hyp)

    def test_corpus_pools_tokens(self):
        assert corpus_wer([[1, 2], [3, 4, 5, 6]], [[1, 2], [3]]) == pytest.approx(3 / 6)


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 2, 3, 4], [1, 0, 3, 0]) == 0.5
        assert accuracy([7], [7]) == 1.0

    def test_contract(self):
        with pytest.raises(ContractViolation):
            accuracy([1, 2], [1])
        with pytest.raises(ContractViolation):
            accuracy([], [])


class TestEntropy:
    def test_uniform(self):
        assert avg_entropy(np.full((3, 5), 0.2)) == pytest.approx(math.log(5), abs=1e-12)

    def test_one_hot(self):
        assert avg_entropy(np.eye(4)) == 0.0

    def test_hand_value(self):
        expected = 0.5 * math.log(2) + 2 * 0.25 * math.log(4)
        assert avg_entropy([[0.5, 0.25, 0.25]]) == pytest.approx(expected, abs=1e-12)

    def test_valid_len(self):
        rows = np.vstack([np.eye(3)[0], np.full(3, 1 / 3)])
        assert avg_entropy(rows, valid_len=1) == 0.0

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ContractViolation):
            avg_entropy([[0.5, 0.4]])

    def test_entropy_rows_from_logits(self):
        z = np.zeros((2, 3, 4))
        z[1, :, 0] = 100.0
        np.testing.assert_allclose(entropy_rows(z), [math.log(4), 0.0], atol=1e-12)
        z[0, 2] = [100, 0, 0, 0]
        np.testing.assert_allclose(entropy_rows(z, [2, 3])[0], math.log(4), atol=1e-12)


def _cfg(**kw):
    base = dict(n_layers=4, d_model=8, num_heads=2, d_ff=16, d_in=3, n_out=5, task="ctc")
    base.update(kw)
    return ModelConfig(**base)


class TestMacs:
    def test_hand_value(self):
        # 4*2*16 + 2*4*4 + 2*2*4*8
        assert macs_per_layer(2, 4, 8) == 288

    def test_empty_sequence(self):
        assert macs_per_layer(0, 4, 8) == 0

    def test_ffn_share_doubles(self):
        T, d, f = 5, 4, 8
        ffn = macs_per_layer(T, d, 2 * f) - macs_per_layer(T, d, f)
        assert ffn == 2 * T * d * f

    def test_affine_in_layers(self):
        c = _cfg()
        values = [sample_macs(c, 7, k) for k in range(5)]
        assert len(set(np.diff(values))) == 1
        assert values[1] - values[0] == macs_per_layer(7, 8, 16)


class TestReportRow:
    def trace(self, executed, lengths, **kw):
        return ForwardTrace(policy=None, executed=np.array(executed), lengths=np.array(lengths), **kw)

    def test_full_counts_all_layers(self):
        c = _cfg()
        r = report_row(self.trace([4, 4], [6, 6]), c, policy="full", metric_name="wer", metric_value=0.1,
                       seed=0, config_hash="h")
        assert r.exec_layers_mean == 4.0
        assert r.macs_per_sample == sample_macs(c, 6, 4)

    def test_k_step_is_one_layer(self):
        c = _cfg()
        a = report_row(self.trace([2, 2], [6, 6]), c, policy="x", metric_name="wer", metric_value=0, seed=0,
                       config_hash="h")
        b = report_row(self.trace([3, 3], [6, 6]), c, policy="x", metric_name="wer", metric_value=0, seed=0,
                       config_hash="h")
        assert b.macs_per_sample - a.macs_per_sample == macs_per_layer(6, 8, 16)

    def test_selector_charged(self):
        c = _cfg(selector=SelectorConfig(kernel_width=3, channels=4, pooled_len=2))
        tr = self.trace([2], [6], scores=np.zeros((1, 4)))
        r = report_row(tr, c, policy="idld_topk", metric_name="wer", metric_value=0, seed=0, config_hash="h")
        sel = 6 * 3 * 8 * 4 + 4 * 2 * 4
        assert r.selector_macs_per_sample == sel
        assert r.macs_per_sample == sample_macs(c, 6, 2) + sel

    def test_exit_heads_charged(self):
        c = _cfg(ee_enabled=True, task="classification")
        tr = self.trace([2, 4], [6, 6], exit_index=np.array([2, 4]))
        r = report_row(tr, c, policy="ee", metric_name="accuracy", metric_value=1, seed=0, config_hash="h")
        expected = (sample_macs(c, 6, 2, heads=2) + sample_macs(c, 6, 4, heads=4)) // 2
        assert r.macs_per_sample == expected

    def test_out_of_range(self):
        with pytest.raises(ContractViolation):
            report_row(self.trace([5], [3]), _cfg(), policy="x", metric_name="wer", metric_value=0, seed=0,
                       config_hash="h")

    def test_csv(self):
        r = report_row(self.trace([1, 2], [3, 3]), _cfg(), policy="p", metric_name="wer", metric_value=0.25,
                       seed=3, config_hash="abc", n=1)
        lines = reports_to_csv([r]).splitlines()
        assert lines[0].split(",") == REPORT_HEADER
        row = dict(zip(REPORT_HEADER, lines[1].split(",")))
        assert row["exec_layers_mean"] == "1.5" and row["n"] == "1" and row["k_mean"] == ""

"""Evaluation metrics and analytic compute accounting.

Compute is counted in multiply-accumulates (1 MAC = 2 FLOPs). Only matrix
products are counted; softmax, normalisation, activations and pooling are
left out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ContractViolation

REPORT_HEADER = ["policy", "n", "k_mean", "metric_name", "metric_value", "metric_std",
                 "exec_layers_mean", "macs_per_sample", "seed", "config_hash"]


def edit_distance(ref, hyp):
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def word_error_rate(ref_tokens, hyp_tokens):
    """Edit distance over reference length. Strings are split on whitespace."""
    ref, hyp = _tokens(ref_tokens), _tokens(hyp_tokens)
    if not ref:
        raise ContractViolation("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs, hyps):
    """Total edits over total reference tokens."""
    refs = [_tokens(r) for r in refs]
    hyps = [_tokens(h) for h in hyps]
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ContractViolation("WER is undefined for empty references")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


def accuracy(predictions, targets):
    predictions, targets = list(predictions), list(targets)
    if len(predictions) != len(targets):
        raise ContractViolation(f"{len(predictions)} predictions vs {len(targets)} targets")
    if not targets:
        raise ContractViolation("accuracy of an empty set is undefined")
    return sum(int(p == t) for p, t in zip(predictions, targets)) / len(targets)


def avg_entropy(prob_rows, valid_len=None):
    """Mean Shannon entropy (nats) of the first ``valid_len`` probability rows."""
    p = np.atleast_2d(np.asarray(prob_rows, dtype=np.float64))
    n = p.shape[0] if valid_len is None else int(valid_len)
    p = p[:n]
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6, rtol=0.0):
        raise ContractViolation("probability rows must sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return float(terms.sum(axis=-1).mean())


def entropy_rows(logits, lengths=None):
    """Per-sample mean entropy of softmax(logits).

    ``(B, V)`` gives one entropy per row; ``(B, T, V)`` averages the per-frame
    entropies over each sample's valid frames.
    """
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ent = -(np.exp(logp) * logp).sum(axis=-1)
    if ent.ndim == 1:
        return ent
    T = ent.shape[1]
    lengths = np.full(ent.shape[0], T) if lengths is None else np.asarray(lengths)
    valid = np.arange(T)[None, :] < lengths[:, None]
    return (ent * valid).sum(axis=1) / lengths


# ----------------------------------------------------------------------
# compute accounting
# ----------------------------------------------------------------------

def macs_per_layer(T, d_model, d_ff):
    """QKVO projections + attention scores and mix + two FFN matmuls."""
    return 4 * T * d_model * d_model + 2 * T * T * d_model + 2 * T * d_model * d_ff


def frontend_macs(T, d_in, d_model):
    return T * d_in * d_model


def head_macs(T, d_model, n_out, task):
    return T * d_model * n_out if task == "ctc" else d_model * n_out


def selector_macs(T, d_model, n_layers, kernel_width, channels, pooled_len):
    return T * kernel_width * d_model * channels + channels * pooled_len * n_layers


def sample_macs(config, T, executed_layers, heads=1, with_selector=False):
    """MACs for one sample of length ``T``; affine in ``executed_layers``."""
    c = config
    total = (frontend_macs(T, c.d_in, c.d_model)
             + executed_layers * macs_per_layer(T, c.d_model, c.d_ff)
             + heads * head_macs(T, c.d_model, c.n_out, c.task))
    if with_selector:
        s = c.selector
        total += selector_macs(T, c.d_model, c.n_layers, s.kernel_width, s.channels, s.pooled_len)
    return int(total)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

@dataclass
class RunReport:
    """One evaluated policy point.

    ``macs_per_sample`` includes selector cost for input-driven policies;
    that share is also given alone in ``selector_macs_per_sample``.
    """

    policy: str
    metric_name: str
    metric_value: float
    exec_layers_mean: float
    macs_per_sample: int
    seed: int
    config_hash: str
    n: Optional[int] = None
    k_mean: Optional[float] = None
    metric_std: float = 0.0
    selector_macs_per_sample: int = 0

    def row(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(round(v, 10))
            return str(v)

        return [fmt(getattr(self, name)) for name in REPORT_HEADER]


def _mean_int(values):
    return int(round(Fraction(int(sum(values)), len(values)))) if values else 0


def report_row(trace, config, *, policy, metric_name, metric_value, seed, config_hash,
               n=None, k_mean=None, metric_std=0.0):
    """Aggregate a (possibly merged) forward trace into a :class:`RunReport`.

    Uses the trace's per-sample ``lengths`` and ``executed`` counts. Early
    exit traces (``exit_index`` set) are charged one head per exit passed;
    traces carrying selector ``scores`` are charged the selector.
    """
    lengths = np.asarray(trace.lengths)
    executed = np.asarray(trace.executed)
    exit_index = getattr(trace, "exit_index", None)
    heads = np.ones_like(lengths) if exit_index is None else np.asarray(exit_index)
    with_selector = getattr(trace, "scores", None) is not None
    if (executed < 0).any() or (executed > config.n_layers).any():
        raise ContractViolation("executed layer counts must lie in [0, N]")
    macs = [sample_macs(config, int(T), int(e), int(h), with_selector) for T, e, h in zip(lengths, executed, heads)]
    sel = []
    if with_selector:
        s = config.selector
        sel = [selector_macs(int(T), config.d_model, config.n_layers, s.kernel_width, s.channels, s.pooled_len)
               for T in lengths]
    return RunReport(
        policy=policy, metric_name=metric_name, metric_value=float(metric_value),
        exec_layers_mean=float(executed.mean()), macs_per_sample=_mean_int(macs),
        seed=int(seed), config_hash=config_hash, n=n, k_mean=k_mean,
        metric_std=float(metric_std), selector_macs_per_sample=_mean_int(sel),
    )


def reports_to_csv(reports, header=True):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()

"""Training objectives: CTC, greedy CTC decoding, cross-entropy, early-exit joint loss.

CTC uses blank index 0 and works entirely in log space. Targets must not
contain the blank.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autograd as ag
from .errors import ContractViolation, InfeasibleAlignmentWarning

BLANK = 0
NEG_INF = -np.inf


def ctc_min_length(target):
    """Fewest frames that can emit ``target``: its length plus adjacent repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target):
    ext = np.zeros(2 * len(target) + 1, dtype=np.intp)
    ext[1::2] = target
    return ext


def shift(a, k):
    out = np.full_like(a, NEG_INF)
    out[:, k:] = a[:, :-k]
    return out


def shift_left(a, k):
    out = np.full_like(a, NEG_INF)
    out[:, :-k] = a[:, k:]
    return out


def ctc_forward_backward(log_probs, targets, input_lengths):
    """Negative log-likelihoods and their gradients for a padded batch.

    ``log_probs`` is ``(B, T, V)``. Returns ``(nll, grad, feasible)`` where
    ``grad`` is d(nll_b)/d(log_probs[b]) and is zero past each input length.
    Infeasible utterances get ``nll = inf`` and a zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, V = lp.shape
    lengths = np.asarray(input_lengths, dtype=np.intp)
    targets = [np.asarray(t, dtype=np.intp).reshape(-1) for t in targets]
    if len(targets) != B or lengths.shape != (B,):
        raise ContractViolation("need one target and one input length per utterance")
    if (lengths > T).any() or (lengths < 0).any():
        raise ContractViolation(f"input lengths must lie in [0, {T}]")
    for t in targets:
        if t.size and (t.min() < 1 or t.max() >= V):
            raise ContractViolation(f"target labels must lie in [1, {V - 1}] (0 is blank)")

    feasible = np.array([ctc_min_length(t) <= n for t, n in zip(targets, lengths)])
    S_max = 2 * max((t.size for t in targets), default=0) + 1
    ext = np.zeros((B, S_max), dtype=np.intp)
    valid_s = np.zeros((B, S_max), dtype=bool)
    skip = np.zeros((B, S_max), dtype=bool)
    S = np.zeros(B, dtype=np.intp)
    for b, t in enumerate(targets):
        e = _extend(t)
        S[b] = e.size
        ext[b, :e.size] = e
        valid_s[b, :e.size] = True
        if e.size > 2:
            skip[b, 2:e.size] = (e[2:] != BLANK) & (e[2:] != e[:-2])

    # (B, T, S): log prob of the extended label at each position
    lpe = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S_max)), axis=2)
    lpe = np.where(valid_s[:, None, :], lpe, NEG_INF)

    alpha = np.full((B, T, S_max), NEG_INF)
    if T:
        alpha[:, 0, 0] = lpe[:, 0, 0]
        if S_max > 1:
            alpha[:, 0, 1] = lpe[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = np.logaddexp(prev, shift(prev, 1))
        if S_max > 2:
            acc = np.logaddexp(acc, np.where(skip, shift(prev, 2), NEG_INF))
        alpha[:, t] = acc + lpe[:, t]

    beta = np.full((B, T, S_max), NEG_INF)
    rows = np.arange(B)
    for t in range(T - 1, -1, -1):
        start = lengths - 1 == t
        if t + 1 < T:
            nxt = beta[:, t + 1]
            acc = np.logaddexp(nxt, shift_left(nxt, 1))
            if S_max > 2:
                acc = np.logaddexp(acc, shift_left(np.where(skip, nxt, NEG_INF), 2))
            beta[:, t] = np.where((t < lengths - 1)[:, None], acc + lpe[:, t], NEG_INF)
        if start.any():
            b = rows[start]
            beta[b, t, S[b] - 1] = lpe[b, t, S[b] - 1]
            two = b[S[b] > 1]
            beta[two, t, S[two] - 2] = lpe[two, t, S[two] - 2]

    nll = np.full(B, np.inf)
    grad = np.zeros_like(lp)
    for b in range(B):
        n = lengths[b]
        if not feasible[b]:
            continue
        if n == 0:
            nll[b] = 0.0
            continue
        log_like = alpha[b, n - 1, S[b] - 1]
        if S[b] > 1:
            log_like = np.logaddexp(log_like, alpha[b, n - 1, S[b] - 2])
        nll[b] = -log_like
        occ = alpha[b, :n, :S[b]] + beta[b, :n, :S[b]] - lpe[b, :n, :S[b]]
        post = np.exp(occ - log_like)
        g = np.zeros((n, V))
        np.add.at(g, (slice(None), ext[b, :S[b]]), post)
        grad[b, :n] = -g
    if not feasible.all():
        warnings.warn(f"{int((~feasible).sum())} CTC target(s) longer than their input allows",
                      InfeasibleAlignmentWarning, stacklevel=3)
    return nll, grad, feasible


def ctc_loss_batch(log_probs, targets, input_lengths):
    """Mean CTC negative log-likelihood over utterances. ``log_probs``: ``(B, T, V)``."""
    log_probs = ag.as_tensor(log_probs)
    nll, grad, _ = ctc_forward_backward(log_probs.data, targets, input_lengths)
    B = len(nll)
    return ag._node(np.array(nll.mean()), (log_probs,), lambda g: (g * grad / B,), "ctc_loss")


def ctc_loss(log_probs, target, input_length=None):
    """CTC negative log-likelihood of one utterance; ``log_probs`` is ``(T, V)``.

    Returns ``inf`` (with an :class:`InfeasibleAlignmentWarning`) when the
    target needs more frames than ``input_length``.
    """
    log_probs = ag.as_tensor(log_probs)
    T = log_probs.shape[0]
    n = T if input_length is None else int(input_length)
    return ctc_loss_batch(log_probs.reshape(1, *log_probs.shape), [target], [n])


def ctc_greedy_decode(log_probs, input_length=None):
    """Best-path decoding: frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    n = lp.shape[0] if input_length is None else int(input_length)
    path = lp[:n].argmax(axis=-1)
    out, prev = [], None
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return out


def cross_entropy(logits, target):
    """``-log softmax(logits)[target]``; batched input ``(B, V)`` gives the batch mean."""
    logits = ag.as_tensor(logits)
    V = logits.shape[-1]
    z = np.atleast_2d(logits.data)
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if tgt.shape[0] != z.shape[0]:
        raise ContractViolation("one target per row of logits is required")
    if (tgt < 0).any() or (tgt >= V).any():
        raise ContractViolation(f"target class must lie in [0, {V}), got {tgt.tolist()}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(len(tgt))
    loss = -logp[rows, tgt].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, tgt] -= 1.0
        return ((g / len(tgt)) * d.reshape(logits.shape),)

    return ag._node(np.array(loss), (logits,), bw, "cross_entropy")


def ee_joint_loss(per_exit_losses, weights=None):
    """Weighted mean of per-exit losses; uniform weights unless given."""
    losses = [ag.as_tensor(x) for x in per_exit_losses]
    if not losses:
        raise ContractViolation("need at least one exit loss")
    if weights is None:
        joint = ag.stack(losses).mean()
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(losses),) or (w < 0).any() or w.sum() <= 0:
            raise ContractViolation("exit weights must be non-negative, one per exit")
        joint = (ag.stack(losses) * (w / w.sum())).sum()
    if np.isposinf(joint.data):
        warnings.warn("early-exit joint loss is infinite", InfeasibleAlignmentWarning, stacklevel=2)
    return joint

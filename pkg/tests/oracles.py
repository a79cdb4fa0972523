"""Independent brute-force references used by the tests."""

import itertools
import math

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(log_probs, target, input_length=None):
    """-log of the summed probability of every frame path that collapses to ``target``."""
    lp = np.asarray(log_probs)
    T = lp.shape[0] if input_length is None else input_length
    V = lp.shape[1]
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == list(target):
            total += math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return math.inf if total == 0.0 else -math.log(total)


def edit_distance_brute(ref, hyp):
    """Shortest edit script by breadth-first search over (i, j) states."""
    ref, hyp = list(ref), list(hyp)
    frontier, seen, cost = {(0, 0)}, {(0, 0)}, 0
    target = (len(ref), len(hyp))
    while target not in frontier:
        nxt = set()
        for i, j in frontier:
            # free diagonal moves on matches
            while i < len(ref) and j < len(hyp) and ref[i] == hyp[j]:
                i, j = i + 1, j + 1
            if (i, j) == target:
                return cost
            for step in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
                if step[0] <= len(ref) and step[1] <= len(hyp) and step not in seen:
                    seen.add(step)
                    nxt.add(step)
        frontier, cost = nxt, cost + 1
    return cost


def random_log_probs(rng, T, V):
    z = rng.normal(size=(T, V)) * 2.0
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

"""Layer selector network and the gate generators that decide which layers run.

Gate scores are plain Tensors of shape ``(N,)`` or ``(B, N)``. Binary
decisions come back as a :class:`GateMask`, whose ``gates`` tensor holds the
exact 0/1 values. For masks derived from selector scores, ``gates`` passes
gradient straight through to the scores of the selected layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractViolation
from .layers import adaptive_avg_pool1d, conv1d_same


@dataclass
class GateMask:
    bits: np.ndarray
    origin: str
    gates: Tensor

    @property
    def popcount(self):
        return self.bits.sum(axis=-1)

    def __len__(self):
        return self.bits.shape[-1]


def _constant_mask(bits, origin):
    bits = np.asarray(bits, dtype=np.int8)
    return GateMask(bits, origin, Tensor(bits.astype(np.float64)))


def straight_through(scores, bits):
    """Forward: ``bits`` as floats. Backward: identity on selected positions, 0 elsewhere."""
    scores = ag.as_tensor(scores)
    keep = np.asarray(bits, dtype=np.float64)
    return ag._node(keep.copy(), (scores,), lambda g: (g * keep,), "straight_through")


def selector_forward(X, params, valid_len=None):
    """Score every encoder layer from the frontend output ``X``.

    norm -> same-length conv -> GELU -> adaptive average pool -> linear.
    Output length is the layer count whatever the number of frames.
    """
    X = ag.as_tensor(X)
    h = params.norm(X)
    if valid_len is not None and X.ndim == 3:
        T = X.shape[1]
        keep = (np.arange(T)[None, :] < np.asarray(valid_len)[:, None]).astype(np.float64)
        h = h * keep[:, :, None]
    elif valid_len is not None and valid_len < X.shape[0]:
        keep = (np.arange(X.shape[0]) < valid_len).astype(np.float64)
        h = h * keep[:, None]
    h = ag.gelu(conv1d_same(h, params.kernel, params.conv_bias))
    pooled = adaptive_avg_pool1d(h, params.pooled_len, valid_len)
    lead = pooled.shape[:-2]
    flat = pooled.reshape(*lead, pooled.shape[-2] * pooled.shape[-1])
    if flat.ndim == 1:
        return (flat.reshape(1, -1) @ params.proj + params.proj_bias).reshape(-1)
    return flat @ params.proj + params.proj_bias


def topk_rows(scores, k):
    """0/1 array with ones at the k largest entries per row; ties go to the lower index."""
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")
    bits = np.zeros(scores.shape, dtype=np.int8)
    np.put_along_axis(bits, order[:, :k], 1, axis=-1)
    return bits


def topk_binarize(G, k):
    G = ag.as_tensor(G)
    N = G.shape[-1]
    if not 1 <= k <= N:
        raise ContractViolation(f"k must lie in [1, {N}], got {k}")
    bits = topk_rows(G.data, k).reshape(G.shape)
    return GateMask(bits, "topk", straight_through(G, bits))


def threshold_binarize(G, gamma):
    """Bit j is on iff score j > gamma; a row with nothing above gamma keeps its argmax."""
    G = ag.as_tensor(G)
    scores = np.atleast_2d(G.data)
    bits = (scores > gamma).astype(np.int8)
    empty = bits.sum(axis=-1) == 0
    if empty.any():
        rows = np.flatnonzero(empty)
        bits[rows, np.argmax(scores[rows], axis=-1)] = 1
    bits = bits.reshape(G.shape)
    return GateMask(bits, "threshold", straight_through(G, bits))


def sample_k(N, rng):
    """Uniform draw from {1, ..., N}."""
    if N < 1:
        raise ContractViolation("N must be >= 1")
    return int(rng.integers(1, N + 1))


def random_gates_bernoulli(N, p_d, rng):
    """Drop each layer with probability ``p_d``; if all dropped, revive one at random."""
    if not 0.0 <= p_d <= 1.0:
        raise ContractViolation(f"drop probability must lie in [0, 1], got {p_d}")
    bits = (rng.random(N) >= p_d).astype(np.int8)
    if not bits.any():
        bits[rng.integers(0, N)] = 1
    return _constant_mask(bits, "bernoulli")


def random_gates_exact(N, n, rng):
    """Enable a uniformly random subset of ``N - n`` layers."""
    if not 0 <= n <= N - 1:
        raise ContractViolation(f"dropped count n must lie in [0, {N - 1}], got {n}")
    bits = np.zeros(N, dtype=np.int8)
    bits[rng.choice(N, size=N - n, replace=False)] = 1
    return _constant_mask(bits, "exact")


def stack_masks(masks, origin=None):
    """Combine per-sample constant masks into one ``(B, N)`` mask."""
    bits = np.stack([m.bits for m in masks])
    return _constant_mask(bits, origin or masks[0].origin)


def full_mask(shape):
    return _constant_mask(np.ones(shape, dtype=np.int8), "full")

"""Transformer building blocks on top of :mod:`idld.autograd`.

Inputs are ``(T, d)`` or batched ``(B, T, d)``. Where a batch carries
padding, ``valid_len`` is an int or a length-``B`` array of valid frame
counts.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractViolation


class Module:
    """Tiny parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _param(array):
    return Tensor(array, requires_grad=True)


def glorot(rng, fan_in, fan_out, shape=None):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return _param(rng.normal(0.0, std, size=shape or (fan_in, fan_out)))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.w = glorot(rng, d_in, d_out)
        self.b = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.scale = _param(np.ones(d))
        self.shift = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.scale, self.shift, self.eps)


class AttentionParams(Module):
    """Query/key/value/output projections, each ``d_model x d_model``."""

    def __init__(self, d_model, num_heads, rng):
        if num_heads < 1 or d_model % num_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        self.num_heads = num_heads
        self.wq = glorot(rng, d_model, d_model)
        self.wk = glorot(rng, d_model, d_model)
        self.wv = glorot(rng, d_model, d_model)
        self.wo = glorot(rng, d_model, d_model)


class FFNParams(Module):
    def __init__(self, d_model, d_ff, rng):
        self.w1 = glorot(rng, d_model, d_ff)
        self.b1 = _param(np.zeros(d_ff))
        self.w2 = glorot(rng, d_ff, d_model)
        self.b2 = _param(np.zeros(d_model))


class EncoderLayerParams(Module):
    """One pre-norm encoder layer: norm->MHA and norm->FFN branches."""

    def __init__(self, d_model, num_heads, d_ff, rng):
        self.norm1 = LayerNorm(d_model)
        self.attn = AttentionParams(d_model, num_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FFNParams(d_model, d_ff, rng)

    def mha_branch(self, y, valid_len=None):
        return multi_head_attention(self.norm1(y), self.attn, valid_len)

    def ffn_branch(self, y):
        return ffn(self.norm2(y), self.ffn)


class SelectorParams(Module):
    """Weights of the layer selector.

    The pooled map is flattened position-major, so ``proj`` row
    ``p * channels + c`` reads channel ``c`` of pooled bin ``p``.
    """

    def __init__(self, d_model, n_layers, rng, kernel_width=3, channels=32, pooled_len=4):
        if kernel_width % 2 == 0:
            raise ConfigError(f"selector kernel_width must be odd, got {kernel_width}")
        if pooled_len < 1 or channels < 1:
            raise ConfigError("selector channels and pooled_len must be positive")
        self.pooled_len = pooled_len
        self.norm = LayerNorm(d_model)
        self.kernel = glorot(rng, d_model * kernel_width, channels,
                             shape=(channels, d_model, kernel_width))
        self.conv_bias = _param(np.zeros(channels))
        self.proj = glorot(rng, channels * pooled_len, n_layers)
        self.proj_bias = _param(np.zeros(n_layers))


# ----------------------------------------------------------------------
# functional ops
# ----------------------------------------------------------------------

def linear(x, w, b=None):
    out = ag.matmul(x, w)
    return out if b is None else out + b


def layer_norm(x, scale, shift, eps=1e-5):
    return ag.layer_norm(x, scale, shift, eps)


gelu = ag.gelu
softmax = ag.softmax


def key_padding_bias(valid_len, T, batch=None):
    """Additive attention bias: 0 for real keys, -inf for padded ones."""
    if valid_len is None:
        return None
    lengths = np.atleast_1d(np.asarray(valid_len))
    if (lengths > T).any() or (lengths < 1).any():
        raise ContractViolation(f"valid_len must lie in [1, {T}], got {lengths.tolist()}")
    if (lengths == T).all():
        return None
    bias = np.where(np.arange(T)[None, :] < lengths[:, None], 0.0, -np.inf)
    if batch is None:
        return bias[0][None, None, :]      # (1, 1, T)
    return bias[:, None, None, :]          # (B, 1, 1, T)


def multi_head_attention(x, params, valid_len=None):
    """Scaled dot-product self-attention; keys at or past ``valid_len`` are masked."""
    x = ag.as_tensor(x)
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    B, T, d = x.shape
    H = params.num_heads
    if d % H:
        raise ConfigError(f"d_model={d} is not divisible by num_heads={H}")
    dh = d // H

    def heads(t):
        return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params.wq)
    k = heads(x @ params.wk)
    v = heads(x @ params.wv)
    scores = (q @ ag.swap_last(k)) * (1.0 / np.sqrt(dh))
    if valid_len is not None:
        lengths = np.broadcast_to(np.asarray(valid_len), (B,))
        bias = key_padding_bias(lengths, T, batch=B)
        if bias is not None:
            scores = scores + bias
    attn = ag.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = ctx @ params.wo
    return out.reshape(T, d) if unbatched else out


def ffn(x, params):
    return linear(ag.gelu(linear(x, params.w1, params.b1)), params.w2, params.b2)


def conv1d_same(x, kernel, bias):
    """Same-length 1-D convolution along time (cross-correlation, zero padded).

    ``kernel`` has shape ``(C, d_in, width)`` with odd ``width``.
    """
    x, kernel, bias = ag.as_tensor(x), ag.as_tensor(kernel), ag.as_tensor(bias)
    C, d_in, width = kernel.shape
    if width % 2 == 0:
        raise ConfigError(f"conv kernel width must be odd, got {width}")
    if x.shape[-1] != d_in:
        raise ContractViolation(f"conv expects {d_in} input channels, got {x.shape[-1]}")
    T = x.shape[-2]
    half = (width - 1) // 2
    if width == 1:
        cols = x
    else:
        xp = ag.pad_axis(x, x.ndim - 2, half, half)
        time = (slice(None),) * (x.ndim - 2)
        cols = ag.concat([xp[time + (slice(i, i + T),)] for i in range(width)], axis=-1)
    w = kernel.transpose(2, 1, 0).reshape(width * d_in, C)
    return cols @ w + bias


def adaptive_pool_matrix(T, out_len, valid_len=None):
    """Averaging matrix ``(out_len, T)``; bin i covers [floor(iL/P), ceil((i+1)L/P))."""
    L = T if valid_len is None else int(valid_len)
    if L < 1 or out_len < 1:
        raise ContractViolation("adaptive pooling needs T >= 1 and P >= 1")
    mat = np.zeros((out_len, T))
    for i in range(out_len):
        lo = (i * L) // out_len
        hi = -((-(i + 1) * L) // out_len)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool1d(x, out_len, valid_len=None):
    """Pool ``(..., T, C)`` to ``(..., out_len, C)`` over the valid frames."""
    x = ag.as_tensor(x)
    T = x.shape[-2]
    if x.ndim == 2 or valid_len is None:
        mat = adaptive_pool_matrix(T, out_len, None if valid_len is None else np.asarray(valid_len).item())
    else:
        mat = np.stack([adaptive_pool_matrix(T, out_len, n) for n in np.asarray(valid_len)])
    return ag.matmul(Tensor(mat), x)


def masked_mean_time(x, valid_len):
    """Mean over the first ``valid_len`` frames: ``(B, T, d) -> (B, d)``."""
    B, T, d = x.shape
    lengths = np.asarray(valid_len)
    weights = np.where(np.arange(T)[None, :] < lengths[:, None], 1.0 / lengths[:, None], 0.0)
    return ag.matmul(Tensor(weights[:, None, :]), x).reshape(B, d)


def spec_mask(x, max_time_mask, max_feat_mask, rng):
    """Zero one random time span and one random feature span of a ``(T, d)`` array.

    Draw order: time width, time start, feature width, feature start. Widths
    are uniform on ``0..max``.
    """
    x = np.array(x, dtype=np.float64)
    T, d = x.shape
    if max_time_mask >= T or max_feat_mask >= d:
        raise ContractViolation(f"mask widths ({max_time_mask}, {max_feat_mask}) must be < ({T}, {d})")
    wt = int(rng.integers(0, max_time_mask + 1))
    t0 = int(rng.integers(0, T - wt + 1))
    wf = int(rng.integers(0, max_feat_mask + 1))
    f0 = int(rng.integers(0, d - wf + 1))
    x[t0:t0 + wt, :] = 0.0
    x[:, f0:f0 + wf] = 0.0
    return x

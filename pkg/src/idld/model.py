"""Dynamic-depth transformer encoder with per-sample layer gating.

Each encoder layer ``j`` computes::

    y_hat = y + g_j * MHA(norm(y))
    y_out = y_hat + g_j * FFN(norm(y_hat))

with a binary gate ``g_j``. A gate of 0 skips the layer entirely: the layer
is not evaluated for that sample and its input is passed on unchanged.
Which gates are on is decided by a policy object: the learned selector
(top-k or thresholded), random dropping, or early exit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractViolation
from .gating import (
    GateMask,
    full_mask,
    random_gates_bernoulli,
    random_gates_exact,
    selector_forward,
    stack_masks,
    threshold_binarize,
    topk_binarize,
)
from .layers import EncoderLayerParams, Linear, Module, SelectorParams, masked_mean_time
from .metrics import entropy_rows

TASKS = ("ctc", "classification")


@dataclass(frozen=True)
class SelectorConfig:
    kernel_width: int = 3
    channels: int = 32
    pooled_len: int = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. ``n_out`` counts the blank for ctc, classes otherwise."""

    n_layers: int = 6
    d_model: int = 64
    num_heads: int = 2
    d_ff: int = 128
    d_in: int = 16
    n_out: int = 4
    task: str = "classification"
    max_len: int = 256
    selector: Optional[SelectorConfig] = None
    ee_enabled: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "ctc" and self.n_out < 2:
            raise ConfigError("a ctc vocabulary needs the blank plus at least one symbol")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        for name in ("d_model", "d_ff", "d_in", "n_out", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


# ----------------------------------------------------------------------
# policies
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Full:
    pass


@dataclass(frozen=True)
class InputDrivenTopK:
    k: int


@dataclass(frozen=True)
class InputDrivenThreshold:
    gamma: float


@dataclass(frozen=True)
class RandomBernoulli:
    p: float


@dataclass(frozen=True)
class RandomExactN:
    n: int


@dataclass(frozen=True)
class EarlyExitEntropy:
    tau: float


@dataclass(frozen=True)
class EarlyExitForced:
    exit: int


GATED_POLICIES = (Full, InputDrivenTopK, InputDrivenThreshold, RandomBernoulli, RandomExactN)
EXIT_POLICIES = (EarlyExitEntropy, EarlyExitForced)


@dataclass
class ForwardTrace:
    policy: object
    lengths: np.ndarray
    executed: np.ndarray
    mask: Optional[np.ndarray] = None
    exit_index: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    hidden: Optional[list] = field(default=None, repr=False)
    gate_mask: Optional[GateMask] = field(default=None, repr=False)


# ----------------------------------------------------------------------
# layer-level helpers
# ----------------------------------------------------------------------

def gated_layer_forward(y_prev, g, layer, valid_len=None):
    """Apply one gated encoder layer.

    ``g`` is a 0/1 number for the whole input, or a Tensor of per-sample
    gates shaped to broadcast against ``y_prev``. A plain 0 returns
    ``y_prev`` itself.
    """
    if not isinstance(g, Tensor):
        if g == 0:
            return y_prev
        if g != 1:
            raise ContractViolation(f"gate must be 0 or 1, got {g}")
        y_hat = y_prev + layer.mha_branch(y_prev, valid_len)
        return y_hat + layer.ffn_branch(y_hat)
    y_hat = y_prev + g * layer.mha_branch(y_prev, valid_len)
    return y_hat + g * layer.ffn_branch(y_hat)


def static_layer_forward(y_prev, layer, valid_len=None):
    y_hat = y_prev + layer.mha_branch(y_prev, valid_len)
    return y_hat + layer.ffn_branch(y_hat)


def _per_sample_rngs(rng, B):
    if rng is None:
        raise ContractViolation("random policies need an rng")
    if isinstance(rng, np.random.Generator):
        return [rng] * B
    rngs = list(rng)
    if len(rngs) != B:
        raise ContractViolation(f"need {B} per-sample generators, got {len(rngs)}")
    return rngs


class DynamicEncoder(Module):
    """Frontend, N gated encoder layers, shared linear head, optional extras.

    ``selector`` exists when ``config.selector`` is set; ``exit_heads`` (one
    per layer below the top, the top using ``head``) when ``ee_enabled``.
    """

    def __init__(self, config, rng=None):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        c = self.config = config
        self.frontend_proj = Linear(c.d_in, c.d_model, rng)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(c.max_len, c.d_model)), requires_grad=True)
        self.layers = [EncoderLayerParams(c.d_model, c.num_heads, c.d_ff, rng) for _ in range(c.n_layers)]
        self.selector = None
        if c.selector is not None:
            s = c.selector
            self.selector = SelectorParams(c.d_model, c.n_layers, rng, s.kernel_width, s.channels, s.pooled_len)
        self.head = Linear(c.d_model, c.n_out, rng)
        self.exit_heads = [Linear(c.d_model, c.n_out, rng) for _ in range(c.n_layers - 1)] if c.ee_enabled else []

    @property
    def n_layers(self):
        return self.config.n_layers

    def state_dict(self):
        return dict(self.named_parameters())

    # ------------------------------------------------------------------
    def frontend(self, features):
        """Project ``(B, T, d_in)`` or ``(T, d_in)`` features and add positions."""
        feats = ag.as_tensor(features)
        if feats.shape[-1] != self.config.d_in:
            raise ConfigError(f"expected feature dim {self.config.d_in}, got {feats.shape[-1]}")
        T = feats.shape[-2]
        if T < 1 or T > self.config.max_len:
            raise ContractViolation(f"sequence length {T} outside [1, {self.config.max_len}]")
        return self.frontend_proj(feats) + self.pos[:T]

    def gate_scores(self, X, lengths):
        if self.selector is None:
            raise ConfigError("this model has no layer selector")
        return selector_forward(X, self.selector, lengths)

    def head_for_exit(self, j):
        """Linear head read at exit ``j`` (1-based); exit N is the shared head."""
        return self.head if j == self.n_layers else self.exit_heads[j - 1]

    def readout(self, y, lengths, head=None):
        head = head or self.head
        if self.config.task == "classification":
            return head(masked_mean_time(y, lengths))
        return head(y)

    def encode(self, X, mask, lengths, keep_hidden=False):
        """Run the gated stack; ``mask.bits`` is ``(B, N)``."""
        bits = mask.bits
        B = X.shape[0]
        if bits.shape != (B, self.n_layers):
            raise ContractViolation(f"mask shape {bits.shape} != ({B}, {self.n_layers})")
        y = X
        hidden = [] if keep_hidden else None
        for j, layer in enumerate(self.layers):
            idx = np.flatnonzero(bits[:, j])
            if idx.size == B:
                g = mask.gates[:, j].reshape(B, 1, 1)
                y = gated_layer_forward(y, g, layer, lengths)
            elif idx.size:
                g = ag.take_rows(mask.gates[:, j], idx).reshape(idx.size, 1, 1)
                sub = gated_layer_forward(ag.take_rows(y, idx), g, layer, lengths[idx])
                y = ag.put_rows(y, idx, sub)
            if keep_hidden:
                hidden.append(y)
        return y, hidden

    def build_mask(self, policy, X, lengths, rng=None):
        B, N = X.shape[0], self.n_layers
        scores = None
        if isinstance(policy, Full):
            mask = full_mask((B, N))
        elif isinstance(policy, InputDrivenTopK):
            scores = self.gate_scores(X, lengths)
            mask = topk_binarize(scores, policy.k)
        elif isinstance(policy, InputDrivenThreshold):
            scores = self.gate_scores(X, lengths)
            mask = threshold_binarize(scores, policy.gamma)
        elif isinstance(policy, RandomBernoulli):
            mask = stack_masks([random_gates_bernoulli(N, policy.p, r) for r in _per_sample_rngs(rng, B)])
        elif isinstance(policy, RandomExactN):
            mask = stack_masks([random_gates_exact(N, policy.n, r) for r in _per_sample_rngs(rng, B)])
        else:
            raise ConfigError(f"{type(policy).__name__} is not a gating policy")
        return mask, scores

    # ------------------------------------------------------------------
    def forward(self, features, lengths=None, policy=Full(), rng=None, keep_hidden=False):
        """Logits and a trace for a batch ``(B, T, d_in)`` or one sample ``(T, d_in)``.

        Logits are ``(B, T, n_out)`` for ctc and ``(B, n_out)`` for
        classification (mean over valid frames before the head). Early-exit
        policies are dispatched to :meth:`early_exit_forward` /
        :meth:`forced_exit_forward`.
        """
        feats, lengths, single = self._prepare(features, lengths)
        if isinstance(policy, EXIT_POLICIES):
            if isinstance(policy, EarlyExitEntropy):
                logits, _, trace = self.early_exit_forward(feats, lengths, policy.tau)
            else:
                logits, trace = self.forced_exit_forward(feats, lengths, policy.exit)
            return (self._unbatch(logits) if single else logits), trace
        X = self.frontend(feats)
        mask, scores = self.build_mask(policy, X, lengths, rng)
        y, hidden = self.encode(X, mask, lengths, keep_hidden)
        logits = self.readout(y, lengths)
        trace = ForwardTrace(policy, lengths, mask.bits.sum(axis=1), mask=mask.bits,
                             scores=None if scores is None else scores.data, hidden=hidden,
                             gate_mask=mask)
        return (self._unbatch(logits) if single else logits), trace

    __call__ = forward

    def exit_logits(self, features, lengths=None):
        """Logits at every exit 1..N for every sample (early-exit training)."""
        self._require_exits()
        feats, lengths, _ = self._prepare(features, lengths)
        y = self.frontend(feats)
        outs = []
        for j, layer in enumerate(self.layers, start=1):
            y = static_layer_forward(y, layer, lengths)
            outs.append(self.readout(y, lengths, self.head_for_exit(j)))
        return outs

    def early_exit_forward(self, features, lengths, tau):
        """Per sample, stop at the first exit whose mean entropy (nats) is below ``tau``.

        Layers above a sample's exit are never run for it. Returns
        ``(logits, exit_index, trace)`` with 1-based exit indices.
        """
        self._require_exits()
        feats, lengths, single = self._prepare(features, lengths)
        B, N = feats.shape[0], self.n_layers
        y = self.frontend(feats)
        active = np.arange(B)
        exit_index = np.zeros(B, dtype=np.intp)
        pieces = {}
        for j, layer in enumerate(self.layers, start=1):
            sub_len = lengths[active]
            y = static_layer_forward(y, layer, sub_len)
            logits = self.readout(y, sub_len, self.head_for_exit(j))
            if j == N:
                done = np.ones(active.size, dtype=bool)
            else:
                done = entropy_rows(logits.data, sub_len) < tau
            for row in np.flatnonzero(done):
                pieces[active[row]] = logits.data[row]
            exit_index[active[done]] = j
            keep = np.flatnonzero(~done)
            if keep.size == 0:
                break
            active = active[keep]
            y = ag.take_rows(y, keep)
        out = Tensor(np.stack([pieces[b] for b in range(B)]))
        trace = ForwardTrace(EarlyExitEntropy(tau), lengths, exit_index.copy(), exit_index=exit_index)
        if single:
            out = self._unbatch(out)
        return out, exit_index, trace

    def forced_exit_forward(self, features, lengths, exit_at):
        """Run layers 1..exit_at and read that exit's head."""
        self._require_exits()
        if not 1 <= exit_at <= self.n_layers:
            raise ContractViolation(f"exit must lie in [1, {self.n_layers}], got {exit_at}")
        feats, lengths, _ = self._prepare(features, lengths)
        y = self.frontend(feats)
        for layer in self.layers[:exit_at]:
            y = static_layer_forward(y, layer, lengths)
        logits = self.readout(y, lengths, self.head_for_exit(exit_at))
        B = feats.shape[0]
        exits = np.full(B, exit_at, dtype=np.intp)
        return logits, ForwardTrace(EarlyExitForced(exit_at), lengths, exits.copy(), exit_index=exits)

    # ------------------------------------------------------------------
    def _require_exits(self):
        if not self.config.ee_enabled:
            raise ConfigError("early-exit policy needs a model built with auxiliary exit heads")

    def _prepare(self, features, lengths):
        feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        single = feats.ndim == 2
        if single:
            feats = feats[None]
        B, T = feats.shape[:2]
        if lengths is None:
            lengths = np.full(B, T, dtype=np.intp)
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.intp))
        if lengths.shape != (B,) or (lengths < 1).any() or (lengths > T).any():
            raise ContractViolation(f"lengths must be {B} values in [1, {T}]")
        return feats, lengths, single

    def _unbatch(self, logits):
        return logits.reshape(*logits.shape[1:])


def count_params(model):
    return sum(p.size for p in model.parameters())


def policy_needs_selector(policy):
    return isinstance(policy, (InputDrivenTopK, InputDrivenThreshold))


def validate_policy(model, policy):
    """Raise ConfigError if ``policy`` cannot run on ``model``."""
    N = model.n_layers
    if policy_needs_selector(policy) and model.selector is None:
        raise ConfigError("input-driven policies need a model trained with a layer selector")
    if isinstance(policy, EXIT_POLICIES) and not model.config.ee_enabled:
        raise ConfigError("early-exit policies need a model trained with exit heads")
    if isinstance(policy, InputDrivenTopK) and not 1 <= policy.k <= N:
        raise ContractViolation(f"k must lie in [1, {N}]")
    if isinstance(policy, RandomExactN) and not 0 <= policy.n < N:
        raise ContractViolation(f"n must lie in [0, {N - 1}]")
    if isinstance(policy, EarlyExitForced) and not 1 <= policy.exit <= N:
        raise ContractViolation(f"exit must lie in [1, {N}]")

"""Experiment configuration: strict JSON <-> dataclasses, plus a stable hash.

Unknown keys are errors. Every error names the offending key path and, for
enumerations, the allowed values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .data import SynthTaskConfig
from .errors import ConfigError
from .model import ModelConfig, SelectorConfig
from .optim import LrSchedule

TRAIN_MODES = ("idld", "rd", "ee", "static")
OPTIMIZERS = ("adam", "adamw")


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 6
    d_model: int = 64
    num_heads: int = 2
    d_ff: int = 128
    max_len: int = 256
    selector: SelectorConfig = SelectorConfig()


@dataclass(frozen=True)
class DataConfig:
    """``source`` is "synthetic" (uses ``synth``) or "manifest" (uses the paths)."""

    source: str = "synthetic"
    synth: SynthTaskConfig = SynthTaskConfig()
    train_manifest: Optional[str] = None
    dev_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    manifest_task: Optional[str] = None
    num_outputs: Optional[int] = None
    frame_len: int = 400
    hop: int = 160
    n_mels: int = 40


@dataclass(frozen=True)
class OptimConfig:
    name: str = "adamw"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    schedule: LrSchedule = LrSchedule()


@dataclass(frozen=True)
class AugmentConfig:
    spec_mask: bool = False
    max_time_mask: int = 4
    max_feat_mask: int = 2


@dataclass(frozen=True)
class TrainConfig:
    """``rd_p`` is a single drop probability or a ``[lo, hi]`` range drawn per batch."""

    mode: str = "idld"
    epochs: int = 10
    batch_size: int = 32
    rd_p: Union[float, tuple] = 0.5
    ee_weights: Optional[tuple] = None
    augment: AugmentConfig = AugmentConfig()
    eval_batch_size: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ArchConfig = ArchConfig()
    data: DataConfig = DataConfig()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        t = self.train
        if t.mode not in TRAIN_MODES:
            raise ConfigError(f"train.mode: {t.mode!r} not in allowed values {list(TRAIN_MODES)}")
        if self.optim.name not in OPTIMIZERS:
            raise ConfigError(f"optim.name: {self.optim.name!r} not in allowed values {list(OPTIMIZERS)}")
        if self.data.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source: {self.data.source!r} not in allowed values ['synthetic', 'manifest']")
        if t.epochs < 0 or t.batch_size < 1 or t.eval_batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and batch sizes >= 1")
        lo, hi = rd_range(t.rd_p)
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"train.rd_p: need 0 <= p <= 1 (or a range lo <= hi), got {t.rd_p}")
        if t.ee_weights is not None and len(t.ee_weights) != self.model.n_layers:
            raise ConfigError("train.ee_weights: need one weight per layer")

    def to_dict(self):
        return _to_jsonable(dataclasses.asdict(self))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def rd_range(p):
    if isinstance(p, (list, tuple)):
        if len(p) != 2:
            raise ConfigError(f"train.rd_p: a range needs exactly two values, got {p}")
        return float(p[0]), float(p[1])
    return float(p), float(p)


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; allowed keys: {sorted(fields)}")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        default = fields[name].default
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            kwargs[name] = _build(type(default), value, sub)
        elif name == "selector" and cls is ArchConfig:
            kwargs[name] = _build(SelectorConfig, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def config_from_dict(raw):
    if "seed" not in raw:
        raise ConfigError("seed is mandatory")
    return _build(ExperimentConfig, raw, "")


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def model_config(cfg, d_in, n_out, task):
    """Architecture for a training mode: selector only for idld, exit heads only for ee."""
    m = cfg.model
    return ModelConfig(
        n_layers=m.n_layers, d_model=m.d_model, num_heads=m.num_heads, d_ff=m.d_ff,
        d_in=d_in, n_out=n_out, task=task, max_len=m.max_len,
        selector=m.selector if cfg.train.mode == "idld" else None,
        ee_enabled=cfg.train.mode == "ee",
    )


def with_overrides(cfg, **changes):
    """Copy of ``cfg`` with dotted-path overrides, e.g. ``{"train.mode": "rd"}``."""
    raw = cfg.to_dict()
    for dotted, value in changes.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return config_from_dict(raw)


__all__ = [
    "ArchConfig", "AugmentConfig", "DataConfig", "ExperimentConfig", "OptimConfig", "TrainConfig",
    "config_from_dict", "load_config", "model_config", "rd_range", "with_overrides",
]

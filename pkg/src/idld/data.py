"""Datasets: synthetic transcription/classification tasks, WAV + log-mel ingestion, batching.

Every synthetic sample is generated from its own generator seeded by
``(seed, task tag, sample id)``, so a dataset is a pure function of its
config and any subset can be regenerated independently. Split ids are
disjoint ranges: train ``[0, n_train)``, dev next, test last.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractViolation, IngestionError, ShortSignalWarning

_PROTO_TAG = 7919
_CTC_TAG = 1
_CLS_TAG = 2


@dataclass(frozen=True)
class SynthTaskConfig:
    """Synthetic task description.

    ``vocab_size`` excludes the CTC blank; ``num_classes`` is used by the
    classification task. Ranges are inclusive ``[lo, hi]``.
    """

    task: str = "classification"
    vocab_size: int = 8
    num_classes: int = 4
    num_distractors: int = 4
    d_in: int = 16
    frames_per_symbol: tuple = (2, 4)
    symbols_per_utt: tuple = (2, 5)
    seq_len: tuple = (12, 24)
    span_len: tuple = (5, 7)
    noise_std: float = 0.1
    num_train: int = 2000
    num_dev: int = 200
    num_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("ctc", "classification"):
            raise ConfigError(f"task must be 'ctc' or 'classification', got {self.task!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for name in ("frames_per_symbol", "symbols_per_utt", "seq_len", "span_len"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if self.task == "ctc" and self.d_in < self.vocab_size:
            raise ConfigError("ctc task needs d_in >= vocab_size for orthogonal prototypes")
        if self.task == "classification":
            if self.d_in < self.num_classes + self.num_distractors + 1:
                raise ConfigError("classification task needs d_in >= num_classes + num_distractors + 1")
            if self.span_len[1] > self.seq_len[0]:
                raise ConfigError("span_len upper bound must not exceed the shortest sequence")
            if self.num_classes < 2:
                raise ConfigError("num_classes must be >= 2")

    @property
    def n_out(self):
        return self.vocab_size + 1 if self.task == "ctc" else self.num_classes

    def split_ids(self, split):
        a, b = self.num_train, self.num_train + self.num_dev
        ranges = {"train": (0, a), "dev": (a, b), "test": (b, b + self.num_test)}
        if split not in ranges:
            raise ContractViolation(f"unknown split {split!r}")
        return range(*ranges[split])


@dataclass
class Sample:
    id: int
    features: np.ndarray
    target: object


@dataclass
class Dataset:
    train: list
    dev: list
    test: list
    task: str
    n_out: int
    d_in: int

    def split(self, name):
        return getattr(self, name)


@dataclass
class Batch:
    features: np.ndarray
    lengths: np.ndarray
    targets: list
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.lengths)


def prototypes(cfg, count):
    """``count`` mutually orthogonal vectors of norm ``sqrt(d_in)``."""
    rng = np.random.default_rng([cfg.seed, _PROTO_TAG])
    q, _ = np.linalg.qr(rng.normal(size=(cfg.d_in, cfg.d_in)))
    return q.T[:count] * np.sqrt(cfg.d_in)


def _ctc_sample(cfg, protos, sid):
    rng = np.random.default_rng([cfg.seed, _CTC_TAG, sid])
    n_sym = int(rng.integers(cfg.symbols_per_utt[0], cfg.symbols_per_utt[1] + 1))
    symbols = []
    for _ in range(n_sym):
        # no immediate repeats: a repeated symbol would render as one longer run
        choices = [s for s in range(1, cfg.vocab_size + 1) if not symbols or s != symbols[-1]]
        symbols.append(int(rng.choice(choices)))
    frames = []
    for s in symbols:
        reps = int(rng.integers(cfg.frames_per_symbol[0], cfg.frames_per_symbol[1] + 1))
        frames.extend([protos[s - 1]] * reps)
    feats = np.array(frames)
    if cfg.noise_std > 0:
        feats = feats + rng.normal(0.0, cfg.noise_std, size=feats.shape)
    return Sample(sid, feats, symbols)


def _cls_sample(cfg, protos, sid):
    """One classification sample.

    Background frames show random class or distractor prototypes. A marked
    span (marker prototype added) holds a strict majority of one class; that
    class is the label.
    """
    rng = np.random.default_rng([cfg.seed, _CLS_TAG, sid])
    K, M = cfg.num_classes, cfg.num_distractors
    class_protos, distract, marker = protos[:K], protos[K:K + M], protos[K + M]
    label = int(rng.integers(0, K))
    T = int(rng.integers(cfg.seq_len[0], cfg.seq_len[1] + 1))
    L = int(rng.integers(cfg.span_len[0], cfg.span_len[1] + 1))
    start = int(rng.integers(0, T - L + 1))
    pool = np.concatenate([class_protos, distract])
    feats = pool[rng.integers(0, len(pool), size=T)]
    majority = L // 2 + 1
    others = [c for c in range(K) if c != label]
    span = [label] * majority + [int(rng.choice(others)) for _ in range(L - majority)]
    span = rng.permutation(span)
    feats[start:start + L] = class_protos[span] + marker
    if cfg.noise_std > 0:
        feats = feats + rng.normal(0.0, cfg.noise_std, size=feats.shape)
    return Sample(sid, feats, label)


def _generate(cfg, make, n_protos):
    protos = prototypes(cfg, n_protos)
    splits = {name: [make(cfg, protos, i) for i in cfg.split_ids(name)] for name in ("train", "dev", "test")}
    return Dataset(task=cfg.task, n_out=cfg.n_out, d_in=cfg.d_in, **splits)


def gen_ctc_task(cfg):
    if cfg.task != "ctc":
        raise ConfigError("gen_ctc_task needs task='ctc'")
    return _generate(cfg, _ctc_sample, cfg.vocab_size)


def gen_cls_task(cfg):
    if cfg.task != "classification":
        raise ConfigError("gen_cls_task needs task='classification'")
    return _generate(cfg, _cls_sample, cfg.num_classes + cfg.num_distractors + 1)


def generate(cfg):
    return gen_ctc_task(cfg) if cfg.task == "ctc" else gen_cls_task(cfg)


def pad_batch(samples):
    """Zero-pad samples to the longest one, keeping their order."""
    samples = list(samples)
    if not samples:
        raise ContractViolation("cannot batch an empty list")
    lengths = np.array([s.features.shape[0] for s in samples], dtype=np.intp)
    d = samples[0].features.shape[1]
    feats = np.zeros((len(samples), int(lengths.max()), d))
    for i, s in enumerate(samples):
        feats[i, :lengths[i]] = s.features
    return Batch(feats, lengths, [s.target for s in samples], [s.id for s in samples])


def iter_batches(samples, batch_size, order=None):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield pad_batch(samples[j] for j in order[i:i + batch_size])


# ----------------------------------------------------------------------
# audio
# ----------------------------------------------------------------------

def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def wav_read(path):
    """Read a 16-bit PCM RIFF/WAVE file as ``(sample_rate, samples in [-1, 1])``.

    Stereo (or more) channels are averaged to mono.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF":
        raise IngestionError("riff_id", "missing 'RIFF' header")
    if data[8:12] != b"WAVE":
        raise IngestionError("wave_id", "missing 'WAVE' form type")
    fmt = pcm = None
    for cid, start, size in _chunks(data):
        if start + size > len(data):
            raise IngestionError(cid.decode("latin-1").strip() + "_size", "chunk runs past end of file")
        if cid == b"fmt ":
            if size < 16:
                raise IngestionError("fmt_size", f"fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", data, start)
        elif cid == b"data":
            pcm = data[start:start + size]
    if fmt is None:
        raise IngestionError("fmt_chunk", "no fmt chunk")
    if pcm is None:
        raise IngestionError("data_chunk", "no data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1:
        raise IngestionError("audio_format", f"only PCM (1) is supported, got {audio_format}")
    if bits != 16:
        raise IngestionError("bits_per_sample", f"only 16-bit PCM is supported, got {bits}")
    if channels < 1:
        raise IngestionError("num_channels", f"invalid channel count {channels}")
    if block_align != 2 * channels:
        raise IngestionError("block_align", f"expected {2 * channels}, got {block_align}")
    n = len(pcm) // block_align
    x = np.frombuffer(pcm[:n * block_align], dtype="<i2").astype(np.float64) / 32768.0
    x = x.reshape(n, channels).mean(axis=1)
    return rate, x


def wav_write(path, samples, sample_rate):
    """Write mono 16-bit PCM; values are clipped to [-1, 1)."""
    import wave

    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels):
    """Triangular filters (peak 1) on the HTK mel scale, 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (centre - lo)
    falling = (hi - freqs[None, :]) / (hi - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(samples, sample_rate, frame_len=400, hop=160, n_mels=40):
    """Log mel-magnitude features ``(T, n_mels)``; ``T = 1 + (len - frame_len) // hop``.

    Hann window, |DFT| of each frame, triangular mel filters, ``log(x + 1e-6)``.
    A signal shorter than one frame is zero padded to a single frame and a
    :class:`ShortSignalWarning` is issued.
    """
    if not frame_len >= hop > 0:
        raise ContractViolation("need frame_len >= hop > 0")
    x = np.asarray(samples, dtype=np.float64)
    if x.size < frame_len:
        warnings.warn(f"signal of {x.size} samples is shorter than one frame ({frame_len})",
                      ShortSignalWarning, stacklevel=2)
        x = np.pad(x, (0, frame_len - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    mag = np.abs(np.fft.rfft(frames * np.hanning(frame_len), n=frame_len, axis=-1))
    return np.log(mag @ mel_filterbank(sample_rate, frame_len, n_mels).T + 1e-6)


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------

def write_manifest(path, samples):
    """One JSON object per line: ``{"id", "features", "target"}``."""
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({"id": s.id, "features": np.asarray(s.features).tolist(),
                                "target": s.target}, separators=(",", ":")) + "\n")


def read_manifest(path, frame_len=400, hop=160, n_mels=40):
    """Load samples; entries carry inline ``features`` or a WAV ``path``."""
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        entry = json.loads(line)
        unknown = set(entry) - {"id", "features", "path", "target"}
        if unknown or "target" not in entry or "id" not in entry:
            raise IngestionError(f"line {lineno}", f"need id, target and features|path; unknown keys {sorted(unknown)}")
        if "features" in entry:
            feats = np.asarray(entry["features"], dtype=np.float64)
        elif "path" in entry:
            wav = Path(entry["path"])
            rate, audio = wav_read(wav if wav.is_absolute() else path.parent / wav)
            feats = log_mel(audio, rate, frame_len, hop, n_mels)
        else:
            raise IngestionError(f"line {lineno}", "entry has neither features nor path")
        if feats.ndim != 2:
            raise IngestionError(f"line {lineno}", "features must be a 2-D list")
        samples.append(Sample(entry["id"], feats, entry["target"]))
    return samples


def infer_task(samples, override: Optional[str] = None):
    if override:
        return override
    return "ctc" if isinstance(samples[0].target, list) else "classification"

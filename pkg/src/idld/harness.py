"""Training loop, evaluation, sweeps and artifact I/O behind the CLI.

Artifacts written by :func:`train` into ``out_dir``:

* ``train_log.csv``   one row per optimizer step
* ``dev_metrics.csv`` one row per epoch
* ``epoch_XXX.dynd``  checkpoint after each epoch (``epoch_000`` is the init)
* ``final.dynd``      the last checkpoint
* ``run.json``        resolved config, its hash and the model architecture

Nothing written carries a timestamp, so identical configs give identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .config import ExperimentConfig, config_from_dict, model_config, rd_range
from .data import Dataset, generate, infer_task, iter_batches, pad_batch, read_manifest, write_manifest
from .errors import ConfigError, ContractViolation, TrainingAborted
from .gating import sample_k
from .layers import spec_mask
from .losses import ctc_greedy_decode, ctc_loss_batch, cross_entropy, ee_joint_loss
from .metrics import RunReport, accuracy, corpus_wer, report_row
from .model import (
    EarlyExitEntropy,
    EarlyExitForced,
    ForwardTrace,
    Full,
    InputDrivenThreshold,
    InputDrivenTopK,
    ModelConfig,
    RandomBernoulli,
    RandomExactN,
    DynamicEncoder,
    SelectorConfig,
    validate_policy,
)
from .optim import OptimState, adamw_step, lr_at

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["step", "epoch", "lr", "loss", "k_or_mask_popcount"]
DEV_HEADER = ["epoch", "metric_name", "metric_value", "config_hash"]
THRESHOLD_HEADER = ["threshold_kind", "threshold", "exec_layers_mean", "metric_name", "metric_value",
                    "macs_per_sample", "seed", "config_hash"]

_MODEL_SEED_TAG = 11
_TRAIN_SEED_TAG = 23


def fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(round(float(v), 10))


# ----------------------------------------------------------------------
# data and model construction
# ----------------------------------------------------------------------

def _infer_n_out(samples, task):
    if task == "ctc":
        return 1 + max((max(s.target) for s in samples if s.target), default=0)
    return 1 + max(int(s.target) for s in samples)


def load_dataset(cfg):
    d = cfg.data
    if d.source == "synthetic":
        return generate(d.synth)
    splits = {}
    for name in ("train", "dev", "test"):
        path = getattr(d, f"{name}_manifest")
        splits[name] = read_manifest(path, d.frame_len, d.hop, d.n_mels) if path else []
    if not splits["train"]:
        raise ConfigError("data.train_manifest is required when data.source is 'manifest'")
    everything = splits["train"] + splits["dev"] + splits["test"]
    task = infer_task(everything, d.manifest_task)
    n_out = d.num_outputs or _infer_n_out(everything, task)
    return Dataset(splits["train"], splits["dev"], splits["test"], task, n_out,
                   everything[0].features.shape[1])


def build_model(cfg, dataset):
    mc = model_config(cfg, dataset.d_in, dataset.n_out, dataset.task)
    return DynamicEncoder(mc, np.random.default_rng([cfg.seed, _MODEL_SEED_TAG]))


def model_from_checkpoint(ckpt):
    """Rebuild the model stored in a loaded checkpoint (weights as float32 values)."""
    raw = dict(ckpt.model)
    if raw.get("selector") is not None:
        raw["selector"] = SelectorConfig(**raw["selector"])
    model = DynamicEncoder(ModelConfig(**raw), np.random.default_rng(0))
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise ConfigError(f"checkpoint parameters do not match the architecture: {missing[:5]}")
    for name, p in params.items():
        stored = ckpt.params[name]
        if stored.shape != p.data.shape:
            raise ConfigError(f"parameter {name}: stored shape {stored.shape} != {p.data.shape}")
        p.data = stored.astype(np.float64)
    return model


def make_checkpoint(cfg, model, opt_state, rng, epoch):
    params = {name: p.data.astype(np.float32) for name, p in model.named_parameters()}
    optimizer = None
    if opt_state is not None:
        optimizer = {
            "step": opt_state.step,
            "hyper": {"base_lr": opt_state.base_lr, "betas": list(opt_state.betas),
                      "eps": opt_state.eps, "weight_decay": opt_state.weight_decay},
            "m": {k: v.astype(np.float32) for k, v in opt_state.m.items()},
            "v": {k: v.astype(np.float32) for k, v in opt_state.v.items()},
        }
    return ckpt_io.Checkpoint(
        config_hash=cfg.config_hash(), config=cfg.to_dict(),
        model=dataclasses.asdict(model.config), params=params, epoch=epoch,
        rng_state=rng.bit_generator.state if rng is not None else None, optimizer=optimizer,
    )


def load_model(path):
    """``(model, checkpoint, experiment config)`` from a checkpoint file."""
    ck = ckpt_io.load(path)
    return model_from_checkpoint(ck), ck, config_from_dict(ck.config)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def task_loss(logits, batch, task):
    if task == "ctc":
        return ctc_loss_batch(ag.log_softmax(logits, axis=-1), batch.targets, batch.lengths)
    return cross_entropy(logits, batch.targets)


def _augment(batch, aug, rng):
    feats = batch.features.copy()
    for i, L in enumerate(batch.lengths):
        L = int(L)
        tmax = min(aug.max_time_mask, L - 1)
        fmax = min(aug.max_feat_mask, feats.shape[2] - 1)
        feats[i, :L] = spec_mask(feats[i, :L], tmax, fmax, rng)
    return dataclasses.replace(batch, features=feats)


def training_step(model, batch, cfg, rng):
    """Loss tensor and the logged gate summary for one batch in the configured mode."""
    mode, N, task = cfg.train.mode, model.n_layers, model.config.task
    if mode == "ee":
        outs = model.exit_logits(batch.features, batch.lengths)
        loss = ee_joint_loss([task_loss(o, batch, task) for o in outs], cfg.train.ee_weights)
        return loss, N
    if mode == "idld":
        k = sample_k(N, rng)
        policy, summary = InputDrivenTopK(k), k
    elif mode == "rd":
        lo, hi = rd_range(cfg.train.rd_p)
        p = lo if lo == hi else float(rng.uniform(lo, hi))
        policy, summary = RandomBernoulli(p), None
    else:
        policy, summary = Full(), N
    logits, trace = model(batch.features, batch.lengths, policy=policy, rng=rng)
    if summary is None:
        summary = float(trace.executed.mean())
    return task_loss(logits, batch, task), summary


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    final_checkpoint: Path
    epochs: int
    steps: int
    dev_metrics: list


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train(cfg: ExperimentConfig, out_dir, dataset: Optional[Dataset] = None):
    """Train per ``cfg`` and write the artifacts listed in the module docstring.

    A non-finite loss raises :class:`TrainingAborted`; the last epoch
    checkpoint on disk stays valid and is named in ``last_good``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or load_dataset(cfg)
    model = build_model(cfg, dataset)
    params = dict(model.named_parameters())
    opt = cfg.optim
    state = OptimState(base_lr=opt.schedule.peak_lr, betas=tuple(opt.betas), eps=opt.eps,
                       weight_decay=opt.weight_decay if opt.name == "adamw" else 0.0)
    rng = np.random.default_rng([cfg.seed, _TRAIN_SEED_TAG])
    chash = cfg.config_hash()
    (out / "run.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "config_hash": chash, "model": dataclasses.asdict(model.config)},
        sort_keys=True, indent=2) + "\n")

    last_good = ckpt_io.save(make_checkpoint(cfg, model, state, rng, 0), out / "epoch_000.dynd")
    log_rows, dev_rows = [], []
    step = 0
    task = model.config.task
    try:
        for epoch in range(1, cfg.train.epochs + 1):
            order = rng.permutation(len(dataset.train))
            for batch in iter_batches(dataset.train, cfg.train.batch_size, order):
                if cfg.train.augment.spec_mask:
                    batch = _augment(batch, cfg.train.augment, rng)
                step += 1
                lr = lr_at(opt.schedule, step)
                loss, summary = training_step(model, batch, cfg, rng)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingAborted(f"non-finite loss {value} at step {step} (epoch {epoch})", last_good)
                grads = ag.backward(loss)
                adamw_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, lr)
                for p in params.values():
                    p.grad = None
                log_rows.append([step, epoch, fmt(lr), fmt(value), fmt(summary)])
            if dataset.dev:
                metric_name, metric, _, _ = evaluate(model, dataset.dev, Full(), task,
                                                     cfg.train.eval_batch_size)
                dev_rows.append([epoch, metric_name, fmt(metric), chash])
                log.info("epoch %d dev %s %.4f", epoch, metric_name, metric)
            last_good = ckpt_io.save(make_checkpoint(cfg, model, state, rng, epoch),
                                     out / f"epoch_{epoch:03d}.dynd")
    finally:
        _write_csv(out / "train_log.csv", TRAIN_LOG_HEADER, log_rows)
        _write_csv(out / "dev_metrics.csv", DEV_HEADER, dev_rows)
    final = out / "final.dynd"
    final.write_bytes(last_good.read_bytes())
    return TrainResult(final, cfg.train.epochs, step, dev_rows)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def _merge_traces(traces):
    def cat(attr):
        parts = [getattr(t, attr) for t in traces]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return ForwardTrace(traces[0].policy, cat("lengths"), cat("executed"), mask=cat("mask"),
                        exit_index=cat("exit_index"), scores=cat("scores"))


def evaluate(model, samples, policy, task, batch_size=64, seed=0):
    """``(metric_name, metric_value, mean_loss, merged_trace)`` over ``samples``.

    Random policies draw each sample's mask from ``default_rng([seed, sample id])``
    so results do not depend on batching. Top-k with ``k = N`` runs as the
    full model (no selector pass).
    """
    validate_policy(model, policy)
    if isinstance(policy, InputDrivenTopK) and policy.k == model.n_layers:
        policy = Full()
    random = isinstance(policy, (RandomBernoulli, RandomExactN))
    preds, refs, traces, loss_sum = [], [], [], 0.0
    for batch in iter_batches(samples, batch_size):
        rngs = [np.random.default_rng([seed, int(i)]) for i in batch.ids] if random else None
        logits, trace = model(batch.features, batch.lengths, policy=policy, rng=rngs)
        traces.append(trace)
        loss_sum += float(task_loss(logits, batch, task).data) * len(batch)
        if task == "ctc":
            lp = ag.log_softmax(logits, axis=-1).data
            preds.extend(ctc_greedy_decode(lp[b], n) for b, n in enumerate(batch.lengths))
        else:
            preds.extend(int(i) for i in logits.data.argmax(axis=-1))
        refs.extend(batch.targets)
    if task == "ctc":
        name, value = "wer", corpus_wer(refs, preds)
    else:
        name, value = "accuracy", accuracy(preds, refs)
    return name, value, loss_sum / len(samples), _merge_traces(traces)


def policy_label(policy):
    return {
        Full: "full", InputDrivenTopK: "idld_topk", InputDrivenThreshold: "idld_threshold",
        RandomBernoulli: "rd_bernoulli", RandomExactN: "rd_exact",
        EarlyExitEntropy: "ee_entropy", EarlyExitForced: "ee_forced",
    }[type(policy)]


def policy_n(policy, N):
    """Number of dropped layers a fixed-depth policy implies; ``None`` otherwise."""
    if isinstance(policy, Full):
        return 0
    if isinstance(policy, InputDrivenTopK):
        return N - policy.k
    if isinstance(policy, RandomExactN):
        return policy.n
    if isinstance(policy, EarlyExitForced):
        return N - policy.exit
    return None


def drop_n_policy(mode, N, n):
    """Policy that drops ``n`` of ``N`` layers the way a checkpoint's training mode does."""
    if not 0 <= n < N:
        raise ContractViolation(f"n must lie in [0, {N - 1}], got {n}")
    if mode == "idld":
        return InputDrivenTopK(N - n)
    if mode == "ee":
        return EarlyExitForced(N - n)
    return RandomExactN(n)


def eval_report(model, samples, policy, cfg_hash, seed=0, batch_size=64):
    name, value, loss, trace = evaluate(model, samples, policy, model.config.task, batch_size, seed)
    N = model.n_layers
    n = policy_n(policy, N)
    report = report_row(trace, model.config, policy=policy_label(policy), metric_name=name,
                        metric_value=value, seed=seed, config_hash=cfg_hash, n=n,
                        k_mean=None if n is None else float(N - n))
    return report, loss


def evaluate_checkpoint(path, policies, split="test", seed=0, batch_size=64):
    model, ck, cfg = load_model(path)
    samples = load_dataset(cfg).split(split)
    return [eval_report(model, samples, p, ck.config_hash, seed, batch_size)[0] for p in policies]


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------

_SWEEP_ORDER = ("rd_exact", "idld_topk", "ee_forced")


def sweep(paths, n_list, rd_seeds=1, split="test", seed=0, batch_size=64):
    """Long-format sweep rows: for each ``n`` (list order), one row per policy family.

    The family of a checkpoint follows its training mode: idld gives top-k
    with ``k = N - n``, ee gives a forced exit at ``N - n``, rd and static
    give an exact random drop of ``n`` layers averaged over ``rd_seeds``
    draws (seeds ``seed .. seed + rd_seeds - 1``). Metric mean and
    population std are taken over checkpoints of the same family.
    """
    if rd_seeds < 1:
        raise ContractViolation("rd_seeds must be >= 1")
    loaded = [load_model(p) for p in paths]
    Ns = {m.n_layers for m, _, _ in loaded}
    if len(Ns) != 1:
        raise ConfigError(f"checkpoints disagree on the number of layers: {sorted(Ns)}")
    N = Ns.pop()
    for n in n_list:
        if not 0 <= n < N:
            raise ContractViolation(f"n must lie in [0, {N - 1}], got {n}")
    datasets = {}
    rows = []
    for n in n_list:
        groups = {}
        for model, ck, cfg in loaded:
            mode = cfg.train.mode
            key = json.dumps(dataclasses.asdict(cfg.data), sort_keys=True)
            if key not in datasets:
                datasets[key] = load_dataset(cfg).split(split)
            samples = datasets[key]
            policy = drop_n_policy(mode, N, n)
            draws = range(seed, seed + rd_seeds) if isinstance(policy, RandomExactN) else [seed]
            reps = [eval_report(model, samples, policy, ck.config_hash, s, batch_size)[0] for s in draws]
            groups.setdefault(policy_label(policy), []).append(reps)
        for label in _SWEEP_ORDER:
            if label not in groups:
                continue
            per_ckpt = [float(np.mean([r.metric_value for r in reps])) for reps in groups[label]]
            flat = [r for reps in groups[label] for r in reps]
            hashes = sorted({r.config_hash for r in flat})
            rows.append(RunReport(
                policy=label, metric_name=flat[0].metric_name, metric_value=float(np.mean(per_ckpt)),
                exec_layers_mean=float(np.mean([r.exec_layers_mean for r in flat])),
                macs_per_sample=int(round(np.mean([r.macs_per_sample for r in flat]))),
                seed=seed, config_hash="+".join(hashes), n=n, k_mean=float(N - n),
                metric_std=float(np.std(per_ckpt)),
            ))
    return rows


def threshold_sweep(path, gammas=None, taus=None, split="test", seed=0, batch_size=64):
    """Rows of :data:`THRESHOLD_HEADER`, in the order the thresholds were given."""
    if (gammas is None) == (taus is None):
        raise ContractViolation("give exactly one of a gate-threshold list or an entropy-threshold list")
    values = list(gammas if gammas is not None else taus)
    if not values:
        raise ContractViolation("threshold list is empty")
    model, ck, cfg = load_model(path)
    samples = load_dataset(cfg).split(split)
    kind = "gate" if gammas is not None else "entropy"
    rows = []
    for v in values:
        policy = InputDrivenThreshold(float(v)) if kind == "gate" else EarlyExitEntropy(float(v))
        rep, _ = eval_report(model, samples, policy, ck.config_hash, seed, batch_size)
        rows.append([kind, fmt(v), fmt(rep.exec_layers_mean), rep.metric_name, fmt(rep.metric_value),
                     rep.macs_per_sample, seed, ck.config_hash])
    return rows


def rows_to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def gen_data(cfg, out_dir):
    """Write the synthetic splits as JSONL manifests; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg.data.synth)
    paths = {}
    for name in ("train", "dev", "test"):
        paths[name] = out / f"{name}.jsonl"
        write_manifest(paths[name], ds.split(name))
    return paths


__all__ = [
    "TRAIN_LOG_HEADER", "DEV_HEADER", "THRESHOLD_HEADER", "TrainResult",
    "build_model", "drop_n_policy", "eval_report", "evaluate", "evaluate_checkpoint", "gen_data",
    "load_dataset", "load_model", "make_checkpoint", "model_from_checkpoint", "pad_batch",
    "policy_label", "rows_to_csv", "sweep", "task_loss", "threshold_sweep", "train", "training_step",
]

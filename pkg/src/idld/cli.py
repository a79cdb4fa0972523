"""Command-line entry point: ``idld {train,eval,sweep,threshold-sweep,gen-data}``.

Global flags: ``--config`` (JSON experiment config), ``--seed`` (overrides the
config seed for train/gen-data; the evaluation draw seed otherwise) and
``--out`` (directory for train/gen-data, CSV file for the report verbs; stdout
when omitted).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config, with_overrides
from .errors import CheckpointError, ConfigError, ContractViolation, IngestionError, TrainingAborted
from .metrics import reports_to_csv
from .model import EarlyExitEntropy, Full, InputDrivenThreshold, InputDrivenTopK, RandomExactN

POLICY_FLAGS = ("full", "drop_n", "topk", "gate_threshold", "rd_exact", "ee_entropy")


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _experiment(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def cmd_train(args):
    cfg = _experiment(args)
    out = args.out or "runs/" + cfg.config_hash()
    result = harness.train(cfg, out)
    print(f"trained {result.epochs} epoch(s), {result.steps} step(s); final checkpoint {result.final_checkpoint}")
    return 0


def eval_policies(args, mode, N):
    chosen = [f for f in POLICY_FLAGS if getattr(args, f) not in (None, False)]
    if len(chosen) != 1:
        flags = ", ".join("--" + f.replace("_", "-") for f in POLICY_FLAGS)
        raise ConfigError(f"give exactly one policy flag out of {flags}; got {len(chosen)}")
    flag = chosen[0]
    values = getattr(args, flag)
    if flag == "full":
        return [Full()]
    if flag == "drop_n":
        return [harness.drop_n_policy(mode, N, n) for n in values]
    make = {"topk": InputDrivenTopK, "gate_threshold": InputDrivenThreshold,
            "rd_exact": RandomExactN, "ee_entropy": EarlyExitEntropy}[flag]
    return [make(v) for v in values]


def cmd_eval(args):
    model, ck, cfg = harness.load_model(args.checkpoint)
    policies = eval_policies(args, cfg.train.mode, model.n_layers)
    samples = harness.load_dataset(cfg).split(args.split)
    seed = 0 if args.seed is None else args.seed
    reports = [harness.eval_report(model, samples, p, ck.config_hash, seed, args.batch_size)[0] for p in policies]
    _emit(reports_to_csv(reports), args.out)
    return 0


def cmd_sweep(args):
    seed = 0 if args.seed is None else args.seed
    rows = harness.sweep(args.checkpoints, args.n_list, args.rd_seeds, args.split, seed, args.batch_size)
    _emit(reports_to_csv(rows), args.out)
    return 0


def cmd_threshold_sweep(args):
    seed = 0 if args.seed is None else args.seed
    rows = harness.threshold_sweep(args.checkpoint, args.gamma_list, args.tau_list, args.split, seed,
                                   args.batch_size)
    _emit(harness.rows_to_csv(harness.THRESHOLD_HEADER, rows), args.out)
    return 0


def cmd_gen_data(args):
    cfg = _experiment(args)
    if args.seed is not None:
        cfg = with_overrides(cfg, **{"data.synth.seed": args.seed})
    paths = harness.gen_data(cfg, args.out or "data")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="idld", description="Input-driven layer dropping experiments",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.set_defaults(func=cmd_train)

    def eval_opts(p):
        p.add_argument("--split", default="test", choices=["train", "dev", "test"])
        p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint under one policy")
    p.add_argument("checkpoint")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--full", action="store_true")
    group.add_argument("--drop-n", type=int, nargs="+", metavar="N")
    group.add_argument("--topk", type=int, nargs="+", metavar="K")
    group.add_argument("--gate-threshold", type=float, nargs="+", metavar="GAMMA")
    group.add_argument("--rd-exact", type=int, nargs="+", metavar="N")
    group.add_argument("--ee-entropy", type=float, nargs="+", metavar="TAU")
    eval_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="metric vs number of dropped layers")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--n-list", type=int, nargs="+", required=True)
    p.add_argument("--rd-seeds", type=int, default=1)
    eval_opts(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("threshold-sweep", parents=[common], help="metric vs gate or entropy threshold")
    p.add_argument("checkpoint")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--gamma-list", type=float, nargs="+")
    group.add_argument("--tau-list", type=float, nargs="+")
    eval_opts(p)
    p.set_defaults(func=cmd_threshold_sweep)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic splits as JSONL manifests")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return 3
    except (ConfigError, ContractViolation, CheckpointError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

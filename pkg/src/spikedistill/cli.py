"""Batch command-line entry point.

Subcommands:
  train                 full training run (metrics.csv, checkpoints, resolved.cfg)
  eval                  evaluate a checkpoint; prints ``accuracy=<float>``
  tools gradcheck       finite-difference check of the differentiable primitives
  tools integrate       integrate an EVST event file into count frames
  tools sfr             write a spike-firing-rate map (PGM + CSV)
  tools risk            risk-estimator variance experiment
  tools early-exit      weak-classifier early-exit evaluation

Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import datasets as ds
from .analysis import early_exit_eval, sfr_map, toy2_distribution, variance_experiment, write_pgm
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config_file
from .losses import DistillConfig
from .runner import load_datasets, run_training
from .training import DivergenceError, evaluate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _common_override_flags(p, include_out=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--ts", type=int, help="inference/student timesteps")
    p.add_argument("--tt", type=int, help="training/teacher timesteps")
    p.add_argument("--alpha", type=float, help="temporal distillation weight")
    p.add_argument("--beta", type=float, help="spatial distillation weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data", help="dataset kind: bars | moving-bar | idx")
    p.add_argument("--train-n", type=int)
    p.add_argument("--test-n", type=int)
    p.add_argument("--noise", type=float)
    if include_out:
        p.add_argument("--out", help="output directory")


def _overrides_from_args(args):
    return {
        "train.seed": args.seed, "distill.ts": args.ts, "distill.tt": args.tt,
        "distill.alpha": args.alpha, "distill.beta": args.beta,
        "train.epochs": args.epochs, "train.lr": args.lr, "train.batch_size": args.batch_size,
        "data.kind": args.data, "data.train_n": args.train_n, "data.test_n": args.test_n,
        "data.noise": args.noise, "out.dir": getattr(args, "out", None),
    }


def _build_run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else None
    return RunConfig.build(file_values, _overrides_from_args(args))


def cmd_train(args):
    try:
        cfg = _build_run_config(args)
        net, rows, final_acc = run_training(cfg)
    except (ConfigError, ds.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"accuracy={final_acc}")
    return EXIT_OK


def cmd_eval(args):
    try:
        net = load_checkpoint(args.checkpoint)
        cfg = _build_run_config(args)
        _, test_set = load_datasets(cfg)
        acc, _ = evaluate(net, test_set, args.ts or cfg.distill.t_student)
    except (CheckpointError, ConfigError, ds.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"accuracy={acc}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .verification import composite_gradcheck

    worst = composite_gradcheck()
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < 1e-3 else EXIT_NUMERIC


def cmd_integrate(args):
    try:
        stream = ds.load_evst(args.infile)
        target = (args.target, args.target) if args.target else None
        ft = ds.integrate_events(stream, args.window_ms, target)
    except (ds.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    np.save(args.out, ft.frames)
    print(f"frames={len(ft.frames)} shape={ft.frames.shape} events={int(ft.frames.sum())}")
    return EXIT_OK


def cmd_sfr(args):
    try:
        net = load_checkpoint(args.checkpoint)
        cfg = _build_run_config(args)
        _, (x, y) = load_datasets(cfg)
        rate_map, mean_rate = sfr_map(net, x[: args.samples], args.ts or cfg.distill.t_student, args.stage)
    except (CheckpointError, ConfigError, ds.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    write_pgm(args.out, rate_map)
    with open(args.out + ".csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + [f"col{i}" for i in range(rate_map.shape[1])])
        for i, row in enumerate(rate_map):
            writer.writerow([i] + [f"{v:.6f}" for v in row])
    print(f"mean_sfr={mean_rate:.6f}")
    return EXIT_OK


def cmd_risk(args):
    if args.contexts != "toy2":
        print(f"error: unknown context set {args.contexts!r} (available: toy2)", file=sys.stderr)
        return EXIT_USAGE
    dist = toy2_distribution()
    losses = [[1.0, 0.0], [0.0, 1.0]]  # fixed predictor: loss 1 on class-0 truth in ctx A, etc.
    try:
        report = variance_experiment(dist, losses, args.n, args.m, seed=args.seed or 0)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(report.csv_rows())
    print(f"empirical_var={report.empirical_var:.6e} distilled_var={report.distilled_var:.6e}")
    print(f"variance_ratio={report.variance_ratio:.4f}")
    return EXIT_OK


def cmd_early_exit(args):
    try:
        net = load_checkpoint(args.checkpoint)
        cfg = _build_run_config(args)
        _, test_set = load_datasets(cfg)
        full, weak, blended, frac = early_exit_eval(
            net, test_set, args.ts or cfg.distill.t_student, args.threshold)
    except (CheckpointError, ConfigError, ds.DataFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"full_accuracy={full} weak_accuracy={weak} blended_accuracy={blended} exit_fraction={frac}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="spikedistill", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network")
    _common_override_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _common_override_flags(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_tools = sub.add_parser("tools", help="analysis and data utilities")
    tsub = p_tools.add_subparsers(dest="tool", required=True)

    p_gc = tsub.add_parser("gradcheck", help="finite-difference gradient check")
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_int = tsub.add_parser("integrate", help="integrate an EVST file into frames")
    p_int.add_argument("--in", dest="infile", required=True)
    p_int.add_argument("--window-ms", type=float, default=10.0)
    p_int.add_argument("--target", type=int, help="downsampled square size")
    p_int.add_argument("--out", required=True, help="output .npy path")
    p_int.set_defaults(fn=cmd_integrate)

    p_sfr = tsub.add_parser("sfr", help="spike-firing-rate map")
    p_sfr.add_argument("--checkpoint", required=True)
    p_sfr.add_argument("--stage", type=int, default=0)
    p_sfr.add_argument("--samples", type=int, default=64)
    p_sfr.add_argument("--out", required=True, help="output .pgm path")
    _common_override_flags(p_sfr, include_out=False)
    p_sfr.set_defaults(fn=cmd_sfr)

    p_risk = tsub.add_parser("risk", help="risk-estimator variance experiment")
    p_risk.add_argument("--contexts", default="toy2")
    p_risk.add_argument("--n", type=int, default=50)
    p_risk.add_argument("--m", type=int, default=10000)
    p_risk.add_argument("--seed", type=int)
    p_risk.add_argument("--out")
    p_risk.set_defaults(fn=cmd_risk)

    p_ee = tsub.add_parser("early-exit", help="weak-classifier early exit")
    p_ee.add_argument("--checkpoint", required=True)
    p_ee.add_argument("--threshold", type=float)
    _common_override_flags(p_ee)
    p_ee.set_defaults(fn=cmd_early_exit)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

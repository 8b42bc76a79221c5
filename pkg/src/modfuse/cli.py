"""Command-line entry point.

Subcommands: train, eval, sweep, gradcheck, gen-data. Configuration comes
from an optional key-value file plus trailing KEY=VALUE overrides; dotted
keys like psa.mu=0.25 are accepted. Exit codes: 0 success, 1 bad
configuration or data, 2 numerical failure, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as D
from .config import load_config
from .errors import ConfigError, DataError, NumericalError
from .gradcheck import TOLERANCE, format_report, gradcheck_all
from .train import evaluate_checkpoint, run_sweep, run_training


def _add_config_args(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="config overrides, e.g. psa.mu=0.25")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="modfuse",
        description="Train and inspect the asynchronous multimodal fusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and keep the best "
                                           "validation checkpoint")
    p_train.add_argument("--baseline", action="store_true",
                         help="train the late-fusion baseline instead")
    _add_config_args(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--split", default="test",
                        choices=["train", "val", "test", "all"])
    p_eval.add_argument("--reps", default=None,
                        help="write pooled representations to this CSV")
    p_eval.add_argument("--attention", default=None,
                        help="write attention maps for one batch under this "
                             "file prefix")

    p_sweep = sub.add_parser("sweep", help="train once per parameter value")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated list, e.g. 0,0.25,1")
    p_sweep.add_argument("--out", default=None, help="sweep CSV path")
    _add_config_args(p_sweep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every "
                                            "module boundary")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--seeds", type=int, default=1,
                      help="number of consecutive seeds to run")

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    p_gen.add_argument("--out", required=True, help="manifest path (.jsonl)")
    p_gen.add_argument("--n", type=int, default=2000)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--mode", default="regression",
                       choices=["regression", "classification"])
    return parser


def cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    kind = "late_fusion" if args.baseline else "full"
    summary = run_training(cfg, model_kind=kind, log=print)
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def cmd_eval(args):
    evaluate_checkpoint(args.checkpoint, split=args.split,
                        dump_reps=args.reps, dump_attention=args.attention,
                        log=print)
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config, args.overrides)
    values = [v for v in args.values.split(",") if v != ""]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = args.out or os.path.join(cfg.out_dir, f"sweep_{args.param}.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    run_sweep(cfg, args.param, [float(v) for v in values], out, log=print)
    print(f"sweep results: {out}")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    ok = True
    for seed in range(args.seed, args.seed + args.seeds):
        report = gradcheck_all(seed)
        print(f"seed {seed}:")
        print(format_report(report))
        worst = max(worst, report["max"])
        ok = ok and report["passed"]
    print(f"overall max {worst:.3e} over {args.seeds} seed(s), "
          f"tolerance {TOLERANCE:g}")
    return 0 if ok else 3


def cmd_gen_data(args):
    spec = D.GeneratorSpec(mode=args.mode)
    samples = D.generate_synthetic(args.n, seed=args.seed, spec=spec)
    D.save_dataset(samples, args.out, mode=args.mode)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: gen-data (synthesize a profile-shaped dataset CSV), train (run
an experiment from a YAML config), eval (score a checkpoint on a test CSV),
selfcheck (run the executable invariant suite), bench-overhead (time the
second-order step against a full lower backward), compare (aggregate run
metrics into a mode table). Flags override config scalars; errors go to
stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import sys

from .data import ImbalanceProfile
from .harness import (
    bench_overhead,
    load_config,
    resolve_out_dir,
    run_compare,
    run_eval,
    run_gen_data,
    run_train,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biasadapt")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset CSV from an imbalance profile")
    g.add_argument("--kind", required=True, choices=("longtail", "step", "reversed_longtail", "uniform"))
    g.add_argument("--gamma", type=float, default=100.0)
    g.add_argument("--n1", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train from a YAML experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mode", choices=("l2ac", "baseline", "plain_attractor", "single_level"), default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="score a checkpoint on a test CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--raw", action="store_true", help="use raw instead of EMA parameters")

    sub.add_parser("selfcheck", help="run the invariant suite; nonzero exit on failure")

    b = sub.add_parser("bench-overhead", help="time the second-order step vs a full lower backward")
    b.add_argument("--config", required=True)
    b.add_argument("--reps", type=int, default=30)

    c = sub.add_parser("compare", help="tabulate bACC/GM mean±std across completed runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--csv-out", default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen-data":
        profile = ImbalanceProfile(args.kind, args.gamma, args.n1, args.classes)
        summary = run_gen_data(profile, args.dim, args.separation, args.seed, args.out, args.force)
        print(json.dumps(summary, sort_keys=True))
        return 0

    if args.command == "train":
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.mode is not None:
            config.train.mode = args.mode
        if args.iters is not None:
            config.train.iters = args.iters
        if args.out is not None:
            config.eval.out_dir = args.out
        config.train.validate()
        payload = run_train(config, force=args.force)
        headline = payload["headline"] or {}
        print(
            f"done: mode={payload['mode']} seed={payload['seed']} "
            f"bACC={headline.get('bacc', float('nan')):.4f} "
            f"GM={headline.get('gm', float('nan')):.4f} "
            f"-> {resolve_out_dir(config.eval.out_dir)}"
        )
        return 0

    if args.command == "eval":
        report = run_eval(args.ckpt, args.test, use_ema=not args.raw)
        print(report.to_json())
        return 0

    if args.command == "selfcheck":
        from .selfcheck import run_all

        checks = run_all()
        failed = 0
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            failed += 0 if ok else 1
        print(f"{len(checks) - failed}/{len(checks)} checks passed")
        return 1 if failed else 0

    if args.command == "bench-overhead":
        config = load_config(args.config)
        result = bench_overhead(config, reps=args.reps)
        print(json.dumps(result, sort_keys=True, indent=2))
        return 0

    if args.command == "compare":
        text, csv_text = run_compare(args.runs)
        print(text)
        if args.csv_out:
            with open(args.csv_out, "w") as fh:
                fh.write(csv_text)
        return 0

    raise ValueError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

Exit status: 0 success, 2 configuration/data error, 3 training divergence,
4 output not writable.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .attacks import ATTACK_NAMES
from .core import rng_for
from .data import gen_gaussian_shift, gen_grid_shift, gen_two_moons_shift, save_dataset
from .augment import GridShape
from .errors import ConfigError, DivergenceError, SchemaError, ValidationError
from .evaluate import export_embeddings
from .runner import (
    SCHEMES,
    RunConfig,
    build_data,
    compare_schemes,
    eval_attacks,
    load_config,
    run_experiment,
    run_scheme,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_OUTPUT = 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides 'seeds'")
    p.add_argument("--out", help="output directory; overrides 'out'")
    p.add_argument("--attack", help=f"comma-separated evaluation attacks from {', '.join(ATTACK_NAMES)}")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-uda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scheme over the configured seeds")
    _common(run)
    run.add_argument("--scheme", choices=SCHEMES)

    cmp_ = sub.add_parser("compare", help="run all five schemes and write comparison.csv")
    _common(cmp_)

    emb = sub.add_parser("embed", help="train one scheme and export clean/adversarial features")
    _common(emb)
    emb.add_argument("--scheme", choices=SCHEMES)
    emb.add_argument("--file", default="embeddings.csv", help="output CSV (default: embeddings.csv)")

    gen = sub.add_parser("gen-data", help="write a synthetic domain pair as CSV")
    gen.add_argument("generator", choices=("two_moons", "gaussian", "grid"))
    gen.add_argument("path")
    gen.add_argument("--n", type=int, default=2000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--rotation", type=float, default=45.0)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--dim", type=int, default=2)
    gen.add_argument("--mean-shift", type=float, default=2.0)
    gen.add_argument("--style-shift", type=float, default=0.3)
    return parser


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "scheme", None):
        cfg.scheme = args.scheme
    if args.seed:
        cfg.seeds = tuple(args.seed)
    if args.out:
        cfg.out = args.out
    if args.attack:
        cfg.attacks = tuple(a.strip() for a in args.attack.split(",") if a.strip())
    return cfg.validate()


def _print_summary(name, summary):
    print(f"[{name}]")
    for k, (mean, sd) in summary.items():
        print(f"  {k:18s} {mean:.4f} +/- {sd:.4f}")


def _gen_data(args):
    rng = rng_for(args.seed, "data")
    if args.generator == "two_moons":
        pair = gen_two_moons_shift(args.n, args.rotation, args.noise, rng)
    elif args.generator == "gaussian":
        pair = gen_gaussian_shift(args.n, args.dim, args.mean_shift, rng)
    else:
        pair = gen_grid_shift(args.n, GridShape(8, 8, 1), args.style_shift, rng)
    save_dataset(pair, args.path)
    print(f"wrote {args.path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            _gen_data(args)
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "run":
            summary, _ = run_experiment(cfg)
            _print_summary(cfg.scheme, summary)
        elif args.command == "compare":
            table, _ = compare_schemes(cfg)
            for scheme, summary in table.items():
                _print_summary(scheme, summary)
            print(f"comparison table: {Path(cfg.out) / 'comparison.csv'}")
        else:
            result = run_scheme(cfg, cfg.scheme, cfg.seeds[0])
            pair = build_data(cfg, cfg.seeds[0])
            budget = eval_attacks(cfg, pair, ["pgd20"])["pgd20"]
            Path(cfg.out).mkdir(parents=True, exist_ok=True)
            path = export_embeddings(result.model, pair.eval_x, pair.eval_y, budget, Path(cfg.out) / args.file)
            print(f"wrote {path}")
    except (ConfigError, SchemaError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

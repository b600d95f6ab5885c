"""Command line entry point: ``vaerobust {train,attack,metrics,report,sweep,demo2d,table}``.

Exit codes: 0 success, 1 configuration error, 2 a pipeline stage failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness as H
from .metrics import format_table

_UNTIL = {"train": "train", "attack": "attack", "metrics": "metrics", "report": "report"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any dotted config key (repeatable)")
    p.add_argument("--quiet", action="store_true")
    for key in H.config_keys():
        if "." in key:
            p.add_argument("--" + key, dest="opt:" + key, metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaerobust", description="VAE encoder robustness experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [("train", "train a model and write a checkpoint"),
                       ("attack", "train (or reuse) then run the attack plan"),
                       ("metrics", "everything up to metrics.csv and summary.json"),
                       ("report", "full pipeline, image grid and table")]:
        _add_common(sub.add_parser(name, help=desc))
    sw = sub.add_parser("sweep", help="full pipeline for several beta values")
    _add_common(sw)
    sw.add_argument("--betas", default="0.5,1,2,4,10")
    demo = sub.add_parser("demo2d", help="2-D latent scatter of supervised attacks")
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--out", default="runs/demo2d")
    demo.add_argument("--epochs", type=int, default=10)
    demo.add_argument("--n-pairs", type=int, default=10)
    demo.add_argument("--budget", type=float, default=3.0)
    demo.add_argument("--quiet", action="store_true")
    tab = sub.add_parser("table", help="print a table from existing summary.json files")
    tab.add_argument("runs", nargs="+")
    tab.add_argument("--key", default="beta")
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise H.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for k, v in vars(args).items():
        if k.startswith("opt:") and v is not None:
            over[k[4:]] = v
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.out is not None:
        over["out"] = args.out
    return over


def _experiment(args) -> H.ExperimentConfig:
    over = _overrides(args)
    if args.config:
        return H.load_config(args.config, over)
    return H.apply_overrides(H.ExperimentConfig(), over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = None if getattr(args, "quiet", False) else (lambda m: print(m, file=sys.stderr))
    try:
        if args.command == "table":
            rows = [json.loads((Path(r) / "summary.json").read_text()) for r in args.runs]
            print(format_table(rows, args.key))
            return 0
        if args.command == "demo2d":
            out = H.demo2d(H.DemoConfig(out=args.out, seed=args.seed, epochs=args.epochs,
                                        n_pairs=args.n_pairs, budget=args.budget), log=log)
            print(json.dumps({"scatter": str(out["scatter"]), "strip": str(out["strip"]),
                              "fraction_closer": out["markers"]["fraction_closer"]}))
            return 0
        cfg = _experiment(args)
        if args.command == "sweep":
            betas = [float(b) for b in args.betas.split(",") if b.strip()]
            runs = H.sweep(cfg, betas, log=log)
            print((Path(cfg.out) / "sweep_table.txt").read_text(), end="")
            return 0 if runs else 1
        out = H.run_experiment(cfg, until=_UNTIL[args.command], reuse=args.command != "train", log=log)
        if args.command == "report":
            print((out / "table.txt").read_text(), end="")
        else:
            print(str(out))
        return 0
    except H.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except H.StageError as err:
        print(str(err), file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

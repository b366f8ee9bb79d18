"""Command-line front end.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
The output directory resolves as ``--out`` > ``$BAYESHAR_OUT`` > config.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import ConfigError, load_config
from .nncore import NumericalError
from .pipeline import MODES, MissingArtifactError, Pipeline
from .tracker import CovarianceError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "metric", None):
        cfg.metric = dataclasses.replace(cfg.metric, mode=args.metric)
    out = args.out or os.environ.get("BAYESHAR_OUT") or cfg.out_dir
    cfg.out_dir = out
    return cfg


def _modes(arg):
    return MODES if arg in (None, "both") else (arg,)


def cmd_generate(p: Pipeline, args):
    return p.generate().manifest()


def cmd_train_encoder(p: Pipeline, args):
    res = p.train_encoder()
    return {"initial_total": res.trace[0]["total"], "final_total": res.trace[-1]["total"]}


def cmd_train_bnn(p: Pipeline, args):
    return {m: p.train_bnn(m).trace[-1] for m in _modes(args.mode)}


def cmd_evaluate(p: Pipeline, args):
    return {m: p.evaluate(m, with_unknown=args.with_unknown) for m in _modes(args.mode)}


def cmd_explain(p: Pipeline, args):
    return p.explain()


def cmd_compress(p: Pipeline, args):
    return p.compress()


def cmd_report(p: Pipeline, args):
    return p.report()


def cmd_run(p: Pipeline, args):
    return p.run_all()


COMMANDS = {
    "generate": cmd_generate,
    "train-encoder": cmd_train_encoder,
    "train-bnn": cmd_train_bnn,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "compress": cmd_compress,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bayeshar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config (default: bundled small config)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--metric", choices=("triplet", "quadruplet"), default=None)
        if name in ("train-bnn", "evaluate"):
            sp.add_argument("--mode", choices=("sota", "tracked", "both"), default="both")
        if name == "evaluate":
            sp.add_argument("--with-unknown", dest="with_unknown", action="store_true", default=True)
            sp.add_argument("--no-unknown", dest="with_unknown", action="store_false")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        result = COMMANDS[args.command](Pipeline(cfg), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, CovarianceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

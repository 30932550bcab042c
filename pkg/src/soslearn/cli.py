"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical failure (singular or non-convergent linear algebra).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__, pipeline
from .config import ConfigError, load_config
from .inversion import DataError
from .io import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("soslearn")


def _model_arg(text: str) -> tuple[str, str]:
    name, sep, spec = text.partition("=")
    return (name, spec) if sep else (text, text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--profile", choices=("desk", "full"), default=None,
                        help="grid size preset applied before the config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="soslearn", description="Learned forward models for "
                                "pulse-echo speed-of-sound imaging.")
    p.add_argument("--version", action="version", version=f"soslearn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="synthesise a phantom dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("learn", parents=[common], help="learn a forward model from a dataset")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")

    s = sub.add_parser("reconstruct", parents=[common], help="invert delays to an SoS map")
    s.add_argument("model", help="model directory, or 'line' / 'window'")
    s.add_argument("delays", help="delay array file (.f32/.json stem)")
    s.add_argument("--mask")
    s.add_argument("--truth", help="ground-truth SoS array, for an RMSE_c report")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="metrics and paired tests for models")
    s.add_argument("dataset")
    s.add_argument("--model", dest="models", action="append", required=True, type=_model_arg,
                   metavar="NAME=DIR", help="model to evaluate; first one is the baseline")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)

    s = sub.add_parser("compare", parents=[common],
                       help="learn on train, evaluate learned vs line model on test")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("info", parents=[common], help="describe a dataset, model or the config")
    s.add_argument("path", nargs="?")
    return p


def _print_comparisons(reports, comparisons):
    for name, rep in reports.items():
        print(f"{name:>10}: median RMSE_t={rep.rmse_t:.3e} s  RMSE_c={rep.rmse_c:.2f} m/s  "
              f"dSoS={rep.delta_sos:.2f} m/s")
    for name, comp in comparisons.items():
        for metric, c in comp.items():
            print(f"{name:>10} {metric:>9}: improvement {c['improvement_pct']:+.1f}%  p={c['p_value']:.2g}")


def run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.profile)
    if args.command == "gen-data":
        m = pipeline.gen_data(cfg, args.out)
        print(f"dataset {m['dataset_id']}: {m['counts']}")
    elif args.command == "learn":
        _, fits = pipeline.learn(cfg, args.dataset, args.out, args.split)
        for f in fits:
            print(f"{f.pair.label}: training RMSE_t {f.rmse_t:.3e} s")
    elif args.command == "reconstruct":
        summary = pipeline.reconstruct_file(cfg, args.model, args.delays, args.out,
                                            args.mask, args.truth)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif args.command == "evaluate":
        models = dict(args.models)
        if len(models) != len(args.models):
            raise ConfigError("evaluate: duplicate model names")
        if len(models) < 2:
            raise ConfigError("evaluate: need at least two --model entries")
        _print_comparisons(*pipeline.evaluate(cfg, models, args.dataset, args.out, args.split))
    elif args.command == "compare":
        _print_comparisons(*pipeline.compare(cfg, args.dataset, args.out))
    elif args.command == "info":
        print(json.dumps(pipeline.info(args.path, cfg), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

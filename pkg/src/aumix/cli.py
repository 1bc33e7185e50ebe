"""Command line entry point: ``aumix {categorize,train,evaluate,matrix}``.

Exit codes (stable):
    0  success
    1  at least one matrix sub-run failed (the others still ran)
    2  invalid configuration or arguments
    3  missing / mismatched category manifest
    4  checkpoint does not match the configuration
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig
from .errors import CheckpointError, ConfigError, ManifestError
from .mixup import Ablation, Strategy

EXIT_OK = 0
EXIT_MATRIX_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MANIFEST = 3
EXIT_CHECKPOINT = 4

log = logging.getLogger("aumix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aumix", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=__doc__.split("\n", 2)[2])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON); defaults are used when omitted")
    common.add_argument("--seed", type=int, help="run only this seed instead of the config's seed list")
    common.add_argument("--strategy", choices=[s.value for s in Strategy])
    common.add_argument("--ablation", choices=[a.value for a in Ablation])
    common.add_argument("--label-smoothing", type=float, metavar="SIGMA")
    common.add_argument("--temperature-scaling", action="store_true", default=None,
                        help="fit a temperature on the dev split and report both No-TS and TS numbers")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("categorize", parents=[common], help="phase 1: margins, AUM and the HIGH/LOW split")
    p = sub.add_parser("train", parents=[common], help="phase 2: train with the chosen strategy")
    p.add_argument("--manifest", help="category manifest to use (default: <out>/categories/seed<S>/categories.json)")
    p.add_argument("--inline", action="store_true", help="run the categorization first if no manifest exists")
    p = sub.add_parser("evaluate", parents=[common], help="ID / OOD calibration reports of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file (default: the run directory of the strategy/seed)")
    sub.add_parser("matrix", parents=[common], help="8 methods x seeds x {No TS, TS} x {ID, OOD}")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.strategy is not None:
        changes["strategy"] = args.strategy
    if args.ablation is not None:
        changes["ablation"] = args.ablation
    if args.label_smoothing is not None:
        changes["label_smoothing"] = args.label_smoothing
    if args.temperature_scaling:
        changes["temperature_scaling"] = True
    if args.out is not None:
        changes["out"] = args.out
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    return cfg.replace(**changes) if changes else cfg


def _cmd_categorize(cfg: RunConfig, args) -> int:
    for seed in cfg.seeds:
        cats, path = pipeline.categorize_run(cfg, seed)
        print(f"seed {seed}: HIGH {len(cats.high)} LOW {len(cats.low)} threshold {cats.threshold!r} -> {path}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, args) -> int:
    if args.manifest and len(cfg.seeds) > 1:
        raise ConfigError("--manifest applies to a single seed; add --seed")
    for seed in cfg.seeds:
        path = pipeline.train_run(cfg, seed, inline=args.inline, manifest=args.manifest)
        print(f"seed {seed}: {path}")
    return EXIT_OK


def _cmd_evaluate(cfg: RunConfig, args) -> int:
    if args.checkpoint and len(cfg.seeds) > 1:
        raise ConfigError("--checkpoint applies to a single seed; add --seed")
    for seed in cfg.seeds:
        ev = pipeline.evaluate_run(cfg, args.checkpoint, seed)
        for (mode, split), rep in sorted(ev.reports.items()):
            t = "" if rep.temperature is None else f" T={rep.temperature:.2f}"
            print(f"seed {seed} {split:>3} {mode:>5}: ECE {rep.ece:.4f} acc {rep.accuracy:.4f}{t}")
        print(f"reports in {ev.out}")
    return EXIT_OK


def _cmd_matrix(cfg: RunConfig, args) -> int:
    rows, failures = pipeline.matrix_run(cfg)
    print(pipeline.format_matrix(rows))
    print(f"written to {cfg.out}/matrix/matrix.csv and matrix.json")
    for f in failures:
        print(f"FAILED: {json.dumps({k: v for k, v in f.items() if k != 'traceback'})}", file=sys.stderr)
    return EXIT_MATRIX_FAILURE if failures else EXIT_OK


COMMANDS = {"categorize": _cmd_categorize, "train": _cmd_train, "evaluate": _cmd_evaluate, "matrix": _cmd_matrix}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, matching EXIT_CONFIG
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())

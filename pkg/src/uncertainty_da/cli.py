"""Command line entry point: ``uda train|eval|export-features|make-synthetic``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .adaptation import TrainingDiverged
from .config import ConfigError, ExperimentConfig, apply_overrides, parse_config
from .data import DataError
from .models import CheckpointError, SpecMismatchError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

log = logging.getLogger("uncertainty_da")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="config file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable, wins over the file")

    sp = sub.add_parser("train", help="train and write metrics.csv + model.ckpt")
    common(sp)
    sp.add_argument("-o", "--out-dir", required=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the configured domains")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--out", help="write per-domain metrics CSV here")

    sp = sub.add_parser("export-features", help="write features, labels and uncertainty")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--out", required=True)

    sp = sub.add_parser("make-synthetic", help="write source.csv and target.csv")
    common(sp)
    sp.add_argument("-o", "--out-dir", required=True)
    return p


def _config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(cfg, args.set)


def _run(args) -> None:
    cfg = _config(args)
    if args.command == "train":
        row = experiment.run_train(cfg, args.out_dir)
        print(json.dumps(row))
    elif args.command == "eval":
        metrics = experiment.run_eval(args.checkpoint, cfg, args.out)
        print(json.dumps(metrics))
    elif args.command == "export-features":
        n = experiment.export_features(args.checkpoint, cfg, args.out)
        print(f"wrote {n} rows to {args.out}")
    else:
        for path in experiment.make_synthetic(cfg, args.out_dir):
            print(path)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # overrides are always worth seeing
    logging.getLogger("uncertainty_da.config").setLevel(logging.INFO)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, SpecMismatchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

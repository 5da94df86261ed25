"""Command line: ``morecl {synth,train,eval,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .data import generate_synthetic, write_features


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--no-back-update", action="store_true", help="skip revisiting earlier heads")
    p.add_argument("--base-prediction", action="store_true", help="plain softmax concatenation, no distance coefficient")
    p.add_argument("--squared-md", action="store_true", help="squared Mahalanobis distance in the coefficient")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morecl")
    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", help="write synthetic train/test feature files")
    train = sub.add_parser("train", help="run the continual-learning experiment")
    ev = sub.add_parser("eval", help="recompute metrics from checkpoints and prediction logs")
    rep = sub.add_parser("report", help="write metric JSON, table and CSV curve")
    for p in (synth, train, ev, rep):
        _common(p)
    train.add_argument("--resume", action="store_true", help="continue after the last saved task")
    train.add_argument("--stop-after", type=int, help="stop after this (0-based) task")
    ev.add_argument("--from-logs", action="store_true", help="use prediction logs only, no re-prediction")
    rep.add_argument("--mode", choices=["json", "table", "csv", "all"], default="all")
    return parser


def resolve_config(args) -> harness.ExperimentConfig:
    config = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    pairs = dict(kv.split("=", 1) for kv in args.set)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.out:
        pairs["out"] = args.out
    if args.no_back_update:
        pairs["back_update"] = "false"
    if args.base_prediction:
        pairs["prediction"] = "base"
    if args.squared_md:
        pairs["squared_md"] = "true"
    return harness.apply_overrides(config, pairs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        config = resolve_config(args)
        out = Path(config.out)
        if args.command == "synth":
            stage = "synth"
            out.mkdir(parents=True, exist_ok=True)
            train, test = generate_synthetic(harness.synthetic_spec(config))
            write_features(out / "train.feat", train)
            write_features(out / "test.feat", test)
            print(f"wrote {out / 'train.feat'} and {out / 'test.feat'}")
        elif args.command == "train":
            stage = "train"
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(harness.dump_config(config))
            record = harness.run_experiment(config, resume=args.resume, stop_after=args.stop_after)
            if record.metrics:
                print(harness.format_table(record.metrics), end="")
        elif args.command == "eval":
            stage = "eval"
            record = harness.recompute_from_logs(out) if args.from_logs else harness.rescore(config)
            print(harness.format_table(record.metrics), end="")
        elif args.command == "report":
            stage = "report"
            record = harness.ExperimentRecord.load(out / "record.json")
            for path in harness.report(record, args.mode, out):
                print(path)
    except harness.ExperimentError as exc:
        print(f"morecl: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"morecl: stage {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line front end: ``rcecg {ingest,train,eval,sweep,export-activations}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import pipeline as pl
from .wfdb_ingest import BEAT_SYMBOLS

logger = logging.getLogger("rcecg")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON pipeline config")
    p.add_argument("--seed", type=int, help="reservoir seed")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--data-dir", dest="data_dir", help="directory holding the WFDB records")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcecg", description="Echo state network ECG beat classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, cache and summarize records")
    _common(p)
    p.add_argument("--record", action="append", help="record id (repeatable); defaults to the config list")

    p = sub.add_parser("train", help="cross-validate and fit one record")
    _common(p)
    p.add_argument("--record", required=True)

    p = sub.add_parser("eval", help="score a trained record on its test slot(s)")
    _common(p)
    p.add_argument("--record", required=True)
    p.add_argument("--model", help="model directory (defaults to <out>/<record>)")

    p = sub.add_parser("sweep", help="train and evaluate every configured record")
    _common(p)
    p.add_argument("--record", action="append", help="restrict to these records")
    p.add_argument("--exclude", help="comma-separated record ids left out of the second global average")
    p.add_argument("--jobs", type=int, help="parallel worker processes")

    p = sub.add_parser("export-activations", help="dump input, neuron and output traces to CSV")
    _common(p)
    p.add_argument("--record", required=True)
    p.add_argument("--model", help="model directory (defaults to the first under <out>/<record>)")
    p.add_argument("--start", type=float, default=0.0, help="start time in seconds")
    p.add_argument("--duration", type=float, default=20.0, help="length in seconds")
    return parser


def _config(args) -> pl.PipelineConfig:
    over = {"seed": args.seed, "output_dir": args.output_dir, "data_dir": args.data_dir}
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    if getattr(args, "exclude", None) is not None:
        over["exclude"] = [e for e in args.exclude.split(",") if e]
    if args.command in ("ingest", "sweep") and args.record:
        over["records"] = args.record
    return pl.load_config(args.config, **over)


def _histogram(record) -> str:
    counts = record.beat_counts()
    big = [c for c, n in counts.items() if n > 50]
    lines = [f"record {record.name}: {record.duration / 60:.1f} min at {record.fs:g} Hz, "
             f"{sum(counts.values())} beats, classes with >50 beats: {' '.join(big) or '-'}"]
    lines += [f"  {code:>2} {n:6d}" for code, n in counts.items() if code in BEAT_SYMBOLS]
    return "\n".join(lines)


def cmd_ingest(cfg: pl.PipelineConfig, args) -> int:
    missing = []
    for rid in cfg.records:
        try:
            stem = pl.record_stem(cfg, rid)
        except FileNotFoundError:
            missing.append(rid)
            continue
        record = pl.load_record(stem)
        pl.cache_record(cfg, record, stem)
        print(_histogram(record))
    if missing:
        print(f"missing records: {' '.join(missing)}", file=sys.stderr)
        print(pl.FETCH_INSTRUCTIONS, file=sys.stderr)
        return 1
    return 0


def cmd_train(cfg, args) -> int:
    for path in pl.run_train(cfg, args.record):
        print(path)
    return 0


def cmd_eval(cfg, args) -> int:
    rows = pl.run_eval(cfg, args.record, args.model, figures=not args.no_figures)
    sys.stdout.write(pl.table_row_csv(rows))
    return 0


def cmd_sweep(cfg, args) -> int:
    summary = pl.run_sweep(cfg, figures=not args.no_figures)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_export(cfg, args) -> int:
    path = pl.export_activations(cfg, args.record, args.start, args.duration, args.model,
                                 figures=not args.no_figures)
    print(path)
    return 0


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "export-activations": cmd_export}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # any failure maps to a nonzero exit
        logger.debug("command failed", exc_info=True)
        print(f"rcecg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``damoe {train,eval,importance,compare,route-trace}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, parse_kv
from .data import ingest, lm_stream, load_labeled
from .exceptions import (
    CheckpointError,
    ComparisonError,
    ConfigError,
    ContractError,
    DimensionError,
    IngestionError,
    NumericalAbort,
)
from .training import LabeledData, LMData, compare_runs, evaluate, export_importance, model_tokenizer, route_trace, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dataset_for(model, path):
    """Evaluation data at ``path`` encoded with the checkpoint's own tokenizer."""
    tok = model_tokenizer(model)
    if model.config.head == "lm":
        stream = lm_stream(tok, ingest(path).documents)
        return LMData(tok, stream, stream)
    rows = load_labeled(path)
    return LabeledData(tok, rows, rows)


def cmd_train(args):
    if not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    try:
        values = parse_kv(Path(args.config).read_text(encoding="utf-8"))
    except UnicodeDecodeError as exc:
        raise UsageError(f"config file is not UTF-8: {exc}") from exc
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    run = RunConfig.from_dict(values)
    if run.data and not Path(run.data).exists():
        raise IngestionError(f"data path {run.data} does not exist")
    result = train(run, out_dir=args.out)
    print(json.dumps(result.summary, indent=2))


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    print(json.dumps(evaluate(model, _dataset_for(model, args.data)), indent=2))


def cmd_importance(args):
    model = load_checkpoint(args.checkpoint)
    records, attention = export_importance(model, args.text)
    if args.dump_attention:
        np.savez(args.dump_attention, **{f"block{b}": w for b, w in attention.items()})
    if args.csv:
        fields = ["block", "batch", "position", "token", "importance", "K",
                  "selected_experts", "gates", "dropped"]
        writer = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in records:
            row = dict(r)
            for key in ("selected_experts", "gates", "dropped"):
                row[key] = ";".join(repr(v) for v in r[key])
            row["importance"] = repr(r["importance"])
            writer.writerow(row)
    else:
        print(json.dumps(records, indent=None if args.compact else 2))


def cmd_compare(args):
    result = compare_runs(args.files)
    if args.json:
        print(json.dumps({"rows": result.rows, "groups": result.groups}, indent=2))
    else:
        print(result.table())


def cmd_route_trace(args):
    model = load_checkpoint(args.checkpoint)
    traces = route_trace(model, _dataset_for(model, args.data), max_batches=args.max_batches)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for t in traces:
            out.write(json.dumps(t) + "\n")
    finally:
        if args.out:
            out.close()


def build_parser():
    parser = _Parser(prog="damoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity or accuracy/F1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="text file/directory (LM) or label<TAB>text file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("importance", help="per-token importance and routing for one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", help="JSON output (default)")
    fmt.add_argument("--csv", action="store_true")
    p.add_argument("--compact", action="store_true", help="single-line JSON")
    p.add_argument("--dump-attention", metavar="NPZ", help="also save attention weights per block")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("compare", help="compare metrics.jsonl files")
    p.add_argument("files", nargs="+")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("route-trace", help="dump routing plans over a dataset as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-batches", type=int, default=None)
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_route_trace)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required (train, eval, importance, compare, route-trace)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
        return EXIT_OK
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, CheckpointError, ComparisonError, DimensionError, ContractError,
            IndexError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

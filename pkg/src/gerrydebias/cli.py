"""Command line entry point: ``gerrydebias {generate,run,report,evaluate,pareto}``."""
import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import experiment as ex
from .data import load_dataset_dir
from .exceptions import DebiasError
from .metrics import DEFAULT_MIN_POSITIVES


def _tradeoffs(text):
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tradeoff list {text!r}")
    if not vals or any(not 0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("tradeoffs must be fractions in (0, 1)")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="gerrydebias", description="Debias representations against gerrymandering groups and score the results.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and split manifest")
    g.add_argument("--config", required=True, help="synthetic spec JSON")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run an experiment sweep")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1)

    for name, help_ in (("report", "frontier plus tradeoff selection table"), ("pareto", "frontier only")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("runs", nargs="+", help="run directories or points.jsonl files")
        s.add_argument("--out")
        if name == "report":
            s.add_argument("--tradeoff", type=_tradeoffs, default=(0.05, 0.10))
        else:
            s.add_argument("--split", default="test", choices=("dev", "test"))

    e = sub.add_parser("evaluate", help="re-score a stored model on a dataset")
    e.add_argument("model", help="model directory inside a run (models/cellNNN)")
    e.add_argument("--data", required=True, help="dataset directory written by generate")
    e.add_argument("--split", default="test", choices=("all", "train", "dev", "test"))
    e.add_argument("--iterate", type=int)
    e.add_argument("--min-positives", type=int, default=DEFAULT_MIN_POSITIVES)
    return p


def _load_split(data_dir, split):
    data_dir = Path(data_dir)
    if split == "all":
        return load_dataset_dir(data_dir)
    cfg = ex.ExperimentConfig(dataset={"dir": str(data_dir)})
    train, dev, test = ex.resolve_splits(cfg)
    return {"train": train, "dev": dev, "test": test}[split]


def _dispatch(args):
    if args.command == "generate":
        paths = ex.cmd_generate(args.config, args.out)
        print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    elif args.command == "run":
        out = ex.cmd_run(args.config, args.out, args.seed, args.jobs)
        print(out)
    elif args.command == "report":
        table, *_ = ex.cmd_report(args.runs, args.tradeoff, args.out)
        print(table, end="")
    elif args.command == "pareto":
        rows = ex.cmd_pareto(args.runs, args.out, args.split)
        print(json.dumps(rows, indent=2))
    elif args.command == "evaluate":
        ds = _load_split(args.data, args.split)
        point = ex.cmd_evaluate(args.model, ds, args.iterate, args.min_positives)
        print(json.dumps(point.to_record(), sort_keys=True))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except (DebiasError, ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        record = {
            "command": args.command,
            "error": type(e).__name__,
            "message": str(e),
            "traceback": traceback.format_exc(),
        }
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        print(json.dumps({k: record[k] for k in ("command", "error", "message")}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

Subcommands::

    stagedvit run <plan.toml> [--out DIR] [--resume] [--data-root PATH]
                              [--seed N] [--jobs N] [--dry-run]
    stagedvit table <store> [--select intermediate=off,pretrain=0+45000]
    stagedvit plot <store> --kind trend|delta [--select ...]
    stagedvit inspect <store> [<cell>]

Exit codes (the stderr line names the category machine-readably as
``error: <category>: message``):

    0  success
    1  internal error
    2  usage error (bad flags/arguments)
    3  plan file malformed or inconsistent
    4  no records / empty selection or series
    5  dataset missing or unreadable
    6  one or more cells failed to train

``--data-root`` sets the DATA_ROOT environment variable for the process,
which is the prefix for relative dataset paths in the plan. ``--out``
defaults to ``<plan stem>-store`` next to the plan file. ``--select``
filters records by ``intermediate=on|off`` and by ``pretrain``/``finetune``
sizes, with ``+`` separating multiple sizes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .errors import DataError, NoRecordsError, PlanError
from .grid import emit_plot, emit_table, pending_cells, run_grid
from .plan import CellKey, load_plan
from .store import RunStore

EXIT_CODES = {"usage": 2, "plan": 3, "records": 4, "dataset": 5, "training": 6, "internal": 1}


def _fail(category: str, message) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return EXIT_CODES[category]


def _parse_selector(text: str):
    sel = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"selector {part!r} is not key=value")
        if key == "intermediate":
            if value not in ("on", "off"):
                raise argparse.ArgumentTypeError("intermediate selector takes on|off")
            sel[key] = value
        elif key in ("pretrain", "finetune"):
            try:
                sel[key] = [int(v) for v in value.split("+")]
            except ValueError:
                raise argparse.ArgumentTypeError(f"{key} selector takes integer sizes") from None
        else:
            raise argparse.ArgumentTypeError(f"unknown selector key {key!r}")
    return sel


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagedvit",
                                     description="staged self-supervised training grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run (or resume) an experiment plan")
    p_run.add_argument("plan", help="plan file (TOML)")
    p_run.add_argument("--out", help="run store directory (default: <plan stem>-store)")
    p_run.add_argument("--resume", action="store_true",
                       help="clear stale locks from a crashed run before starting")
    p_run.add_argument("--data-root", help="prefix for relative dataset paths ($DATA_ROOT)")
    p_run.add_argument("--seed", type=int, help="override the plan's base seed")
    p_run.add_argument("--jobs", type=int, default=1, help="cells to run in parallel")
    p_run.add_argument("--dry-run", action="store_true",
                       help="print the resolved cell list and train nothing")

    p_table = sub.add_parser("table", help="aggregate records into markdown + CSV")
    p_table.add_argument("store", help="run store directory")
    p_table.add_argument("--select", type=_parse_selector, default=None,
                         help="filter, e.g. intermediate=off,pretrain=0+45000")

    p_plot = sub.add_parser("plot", help="render a figure (SVG + CSV) from records")
    p_plot.add_argument("store", help="run store directory")
    p_plot.add_argument("--kind", choices=("trend", "delta"), required=True)
    p_plot.add_argument("--select", type=_parse_selector, default=None)

    p_inspect = sub.add_parser("inspect", help="print one cell's record (or list cells)")
    p_inspect.add_argument("store", help="run store directory")
    p_inspect.add_argument("cell", nargs="?", help="cell key, e.g. p2000-noint-f400-r0")
    return parser


def _cmd_run(args) -> int:
    try:
        plan = load_plan(args.plan)
        if args.seed is not None:
            plan = replace(plan, seed=args.seed)
    except PlanError as e:
        return _fail("plan", e)
    if args.data_root:
        os.environ["DATA_ROOT"] = args.data_root
    out = Path(args.out) if args.out else Path(args.plan).with_name(Path(args.plan).stem + "-store")
    store = RunStore(out)
    todo, done = pending_cells(plan, store)

    if args.dry_run:
        finished = {str(c) for c in done}
        for cell in plan.cells():
            state = "complete" if str(cell) in finished else "pending"
            print(f"{cell}  [{state}]")
        print(f"-- {len(plan.cells())} cells: {len(done)} complete, {len(todo)} pending")
        return 0

    total = len(plan.cells())
    counter = {"n": len(done)}

    def progress(cell, rec):
        counter["n"] += 1
        if rec.complete:
            print(f"[{counter['n']}/{total}] {cell}  mIoU {rec.metrics['miou']:.2f}%  "
                  f"accuracy {rec.metrics['accuracy']:.2f}%", flush=True)
        else:
            tail = rec.error.strip().splitlines()[-1] if rec.error else "unknown error"
            print(f"[{counter['n']}/{total}] {cell}  FAILED: {tail}", flush=True)

    try:
        records = run_grid(plan, store, jobs=args.jobs, resume=args.resume, progress=progress)
    except DataError as e:
        return _fail("dataset", e)
    failed = [r for r in records if r.status == "failed"]
    print(f"-- {len(records)} records in {store.root} ({len(failed)} failed)")
    if failed:
        return _fail("training", f"{len(failed)} of {len(records)} cells failed")
    return 0


def _cmd_table(args) -> int:
    try:
        md, _ = emit_table(RunStore(args.store, create=False), args.select)
    except NoRecordsError:
        return _fail("records", "no records")
    print(md)
    print(f"wrote {Path(args.store) / 'tables' / 'table.md'} and table.csv", file=sys.stderr)
    return 0


def _cmd_plot(args) -> int:
    try:
        svg, csv_path = emit_plot(RunStore(args.store, create=False), args.kind, args.select)
    except NoRecordsError as e:
        return _fail("records", e)
    print(svg)
    print(csv_path)
    return 0


def _cmd_inspect(args) -> int:
    store = RunStore(args.store, create=False)
    if args.cell is None:
        names = store.record_names()
        if not names:
            return _fail("records", "no records")
        for name in names:
            rec = store.load_record(name)
            print(f"{name}  [{rec.status}]")
        return 0
    try:
        CellKey.parse(args.cell)
    except PlanError as e:
        return _fail("usage", e)
    rec = store.load_record(args.cell)
    if rec is None:
        return _fail("records", f"no record for cell {args.cell}")
    print(json.dumps(asdict(rec), indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "table": _cmd_table,
               "plot": _cmd_plot, "inspect": _cmd_inspect}[args.command]
    try:
        return handler(args)
    except Exception as e:  # anything uncategorized is an internal error
        return _fail("internal", f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())

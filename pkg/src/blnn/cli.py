"""Command-line front end for the desk-scale experiments.

Each run writes ``<out>/<command>/<timestamp>/`` holding ``config.json`` (the
fully resolved parameters), ``results.csv``, ``metrics.json`` and any extra
CSV tables. The exit code is 0 when every check passes; otherwise a JSON
failure report goes to stderr and to ``failures.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import experiments as ex

COMMANDS = tuple(ex.RUNNERS)


def _cell(v):
    v = ex._jsonable(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def write_rows(rows, path):
    """RFC-4180 CSV with the union of keys as header, in first-seen order."""
    header = []
    for r in rows:
        header += [k for k in r if k not in header]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _write_json(obj, path):
    Path(path).write_text(json.dumps(ex._jsonable(obj), indent=2, sort_keys=True) + "\n")


def parse_param(text):
    """``key=value`` where the value is read as JSON, falling back to a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def run_dir(out, command):
    base = Path(out) / command
    stamp = time.strftime("%Y%m%dT%H%M%S")
    path, k = base / stamp, 1
    while path.exists():
        path, k = base / f"{stamp}-{k}", k + 1
    path.mkdir(parents=True)
    return path


def build_parser():
    p = argparse.ArgumentParser(prog="blnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=(ex.RUNNERS[name].__doc__ or name).strip().splitlines()[0])
        s.add_argument("--config", type=Path, help="JSON file with parameter overrides")
        s.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
        s.add_argument("--param", "-p", action="append", type=parse_param, default=[],
                       metavar="KEY=VALUE", help="override one parameter (JSON value)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0:
        print("--seed must be nonnegative", file=sys.stderr)
        return 2
    overrides = json.loads(args.config.read_text()) if args.config else {}
    overrides.update(dict(args.param))
    try:
        params = ex.resolve(args.command, overrides, args.seed, args.threads)
    except KeyError as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}), file=sys.stderr)
        return 2

    out = run_dir(args.out, args.command)
    _write_json({"command": args.command, "params": params}, out / "config.json")
    try:
        result = ex.run(args.command, params)
    except Exception as exc:  # report, do not trace
        report = {"command": args.command, "error": f"{type(exc).__name__}: {exc}", "dir": str(out)}
        _write_json(report, out / "failures.json")
        print(json.dumps(report), file=sys.stderr)
        return 2

    write_rows(result.rows, out / "results.csv")
    for name, rows in result.tables.items():
        write_rows(rows, out / name)
    for name, doc in result.documents.items():
        _write_json(doc, out / name)
    _write_json({"metrics": result.metrics, "checks": [c.to_dict() for c in result.checks],
                 "passed": result.passed}, out / "metrics.json")
    print(out)
    if not result.passed:
        report = {"command": args.command, "dir": str(out), "failed": result.failures()}
        _write_json(report, out / "failures.json")
        print(json.dumps(ex._jsonable(report)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

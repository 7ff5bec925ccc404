"""Command line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from cids.harness.config import ConfigError, load_scenario
from cids.harness.report import report_text
from cids.harness.runner import InvariantViolation, replay, run_scenario
from cids.siem import QueryError, Repository
from cids.store import EventStore, dump_sql

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _cmd_run(args) -> int:
    spec = load_scenario(args.scenario, seed=args.seed)
    if args.no_trace:
        spec.trace = False
    result = run_scenario(spec, args.out)
    sys.stdout.write(report_text(result.metrics.to_dict()))
    print(f"artifacts in {args.out} ({result.wall_time:.2f} s)")
    return EXIT_OK


def _cmd_replay(args) -> int:
    trace = Path(args.trace)
    result = replay(trace, args.out)
    replayed = result.metrics.to_dict()
    sys.stdout.write(report_text(replayed))
    original = trace.parent / "report.json"
    if original.exists():
        if json.loads(original.read_text(encoding="utf-8")) != json.loads(json.dumps(replayed)):
            print(f"replay differs from {original}", file=sys.stderr)
            return EXIT_INVARIANT
        print(f"replay matches {original}")
    return EXIT_OK


def _cmd_query(args) -> int:
    repo = Repository.load(Path(args.run) / "siem.ndjson")
    res = repo.run_query(args.query)
    if args.json:
        print(json.dumps({"columns": res.columns, "rows": [list(r) for r in res.rows]}))
    else:
        print(res.to_text())
    return EXIT_OK


def _cmd_report(args) -> int:
    m = json.loads((Path(args.run) / "report.json").read_text(encoding="utf-8"))
    sys.stdout.write(report_text(m))
    return EXIT_OK


def _cmd_dump(args) -> int:
    if not args.sql:
        print("dump: only --sql output is supported", file=sys.stderr)
        return EXIT_CONFIG
    store = EventStore.load(Path(args.run) / "store.ndjson")
    sys.stdout.write(dump_sql(store.rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cids", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--no-trace", action="store_true", help="skip trace.ndjson")
    r.set_defaults(func=_cmd_run)

    rp = sub.add_parser("replay", help="re-run the packet stream recorded in a trace")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--out", default=None)
    rp.set_defaults(func=_cmd_replay)

    q = sub.add_parser("query", help="query the SIEM events of a run")
    q.add_argument("--run", required=True)
    q.add_argument("--json", action="store_true")
    q.add_argument("query")
    q.set_defaults(func=_cmd_query)

    rep = sub.add_parser("report", help="print the summary of a run")
    rep.add_argument("--run", required=True)
    rep.set_defaults(func=_cmd_report)

    d = sub.add_parser("dump", help="dump the SystemEvents table of a run")
    d.add_argument("--sql", action="store_true")
    d.add_argument("--run", required=True)
    d.set_defaults(func=_cmd_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except QueryError as e:
        print(f"query error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

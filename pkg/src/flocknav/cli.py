"""Command-line entry point: ``flocknav run | compare | reference``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness
from .scenario import ParseError, ValidationError, load_scenario, shipped


def _scenario_path(value: str) -> Path:
    p = Path(value)
    if p.exists():
        return p
    # bare names resolve to bundled scenarios
    return shipped(value)


def _cmd_run(args) -> int:
    sc = load_scenario(_scenario_path(args.scenario))
    seed = args.seed
    if seed is None and os.environ.get("FLOCKNAV_SEED"):
        seed = int(os.environ["FLOCKNAV_SEED"])
    out = args.out or os.environ.get("FLOCKNAV_OUT_DIR") or f"runs/{sc.name}-{args.mode}"
    summary = harness.run(sc, args.mode, out, ticks=args.ticks, seed=seed)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_compare(args) -> int:
    table = harness.compare(args.a, args.b)
    harness.write_comparison(table, args.out)
    print(f"mean deviation a={table['mean_a']:.4f} b={table['mean_b']:.4f} ratio={table['mean_ratio']:.4f}")
    return 0


def _cmd_reference(args) -> int:
    sc = load_scenario(_scenario_path(args.scenario))
    Path(args.out).write_text(json.dumps(harness.reference_path(sc), indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flocknav", description="Decentralized NMPC flock navigation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    r.add_argument("--mode", choices=["lockstep", "async"], default="lockstep")
    r.add_argument("--out", help="output directory (default: $FLOCKNAV_OUT_DIR or runs/<name>-<mode>)")
    r.add_argument("--seed", type=int, help="override the scenario seed (default: $FLOCKNAV_SEED)")
    r.add_argument("--ticks", type=int, help="override the episode length")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="compare centroid deviation of two logs")
    c.add_argument("--a", required=True, help="first ticks.jsonl")
    c.add_argument("--b", required=True, help="second ticks.jsonl")
    c.add_argument("--out", required=True, help="output table (.csv or .json)")
    c.set_defaults(func=_cmd_compare)

    f = sub.add_parser("reference", help="write the optimized leader path")
    f.add_argument("--scenario", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=_cmd_reference)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError, harness.SchemaMismatch, FileNotFoundError) as exc:
        print(f"flocknav: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Episode orchestration, logs, summaries and run-vs-run comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .coordination import WALL_CLOCK_FIELDS, EpisodeLog, TickRecord, build_references, run_async, run_lockstep
from .scenario import Scenario, load_scenario

LOG_NAME = "ticks.jsonl"
SUMMARY_NAME = "summary.json"


class SchemaMismatch(ValueError):
    """Two logs cannot be compared record for record."""


def _record_dict(rec) -> dict:
    return rec.as_dict() if isinstance(rec, TickRecord) else dict(rec)


def _line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=False)


def log_digest(records: Iterable) -> str:
    """SHA-256 over the canonical log with machine-dependent timing fields removed."""
    h = hashlib.sha256()
    for rec in records:
        d = {k: v for k, v in _record_dict(rec).items() if k not in WALL_CLOCK_FIELDS}
        h.update(_line(d).encode())
        h.update(b"\n")
    return h.hexdigest()


class LogWriter:
    """Single writer for a JSON-lines log; flushes each record so partial runs survive."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def __call__(self, rec) -> None:
        self._fh.write(_line(_record_dict(rec)) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def export_csv(records: Sequence, path) -> None:
    rows = [_record_dict(r) for r in records]
    cols = list(TickRecord.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([json.dumps(r.get(c)) if isinstance(r.get(c), list) else r.get(c) for c in cols])


def _stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"count": 0, "mean": 0.0, "max": 0.0, "min": 0.0}
    return {"count": int(v.size), "mean": float(v.mean()), "max": float(v.max()), "min": float(v.min())}


def summarize(records: Sequence, scenario: Optional[Scenario] = None) -> dict:
    """Aggregate metrics over a log.  An empty log yields zero counts and means."""
    rows = [_record_dict(r) for r in records]
    followers = [r for r in rows if r["role"] == "follower"]
    solves = [r["solve_time_ms"] for r in rows if r.get("solve_time_ms") is not None]
    solve = _stats(solves)
    budget = None if scenario is None else scenario.solver.time_budget
    within = 0.0
    if solves and budget is not None:
        within = float(np.mean(np.asarray(solves) <= budget))
    statuses: dict = {}
    for r in rows:
        if r.get("status") is not None:
            statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    dev = _stats(r["centroid_deviation"] for r in followers)
    per_agent = {}
    for r in followers:
        per_agent.setdefault(str(r["agent"]), []).append(r["centroid_deviation"])
    sep = _stats(r.get("min_separation") for r in rows)
    clear = _stats(r.get("min_clearance") for r in rows)
    out_of_box = 0
    if scenario is not None:
        s = scenario.inputs
        out_of_box = sum(1 for r in rows if not (s.v_min <= r["input"][0] <= s.v_max
                                                 and s.omega_min <= r["input"][1] <= s.omega_max))
    ticks = sorted({r["tick"] for r in rows})
    return {
        "records": len(rows),
        "ticks": len(ticks),
        "agents": len({str(r["agent"]) for r in rows}),
        "solve_time_ms": {"count": solve["count"], "mean": solve["mean"], "max": solve["max"],
                          "p99": float(np.percentile(solves, 99)) if solves else 0.0,
                          "within_budget_fraction": within},
        "budget_hits": statuses.get("BudgetExhausted", 0),
        "status_counts": statuses,
        "centroid_deviation": {"mean": dev["mean"], "max": dev["max"],
                               "per_agent_mean": {k: float(np.mean(v)) for k, v in per_agent.items()}},
        # None when nothing was measured (single agent, empty world)
        "min_separation": sep["min"] if sep["count"] else None,
        "min_clearance": clear["min"] if clear["count"] else None,
        "inputs_outside_box": out_of_box,
        "digest": log_digest(rows),
    }


def run(scenario: Union[Scenario, str, os.PathLike], mode: str = "lockstep", out_dir=None,
        ticks: Optional[int] = None, seed: Optional[int] = None) -> dict:
    """Run an episode, write ``ticks.jsonl`` and ``summary.json`` under ``out_dir``, return the summary."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    if seed is not None:
        sc = sc.replace(seed=seed)
    if ticks is not None:
        sc = sc.replace(ticks=ticks)
    if out_dir is None:
        out_dir = os.environ.get("FLOCKNAV_OUT_DIR", "runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with LogWriter(out / LOG_NAME) as writer:
        if mode == "lockstep":
            log = run_lockstep(sc, on_record=writer)
        elif mode == "async":
            log = run_async(sc, on_record=writer)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    summary = {"scenario": sc.name, "mode": mode, "seed": sc.seed, **summarize(log.records, sc)}
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_log(scenario: Scenario, mode: str = "lockstep") -> EpisodeLog:
    """Run without touching the filesystem."""
    return run_lockstep(scenario) if mode == "lockstep" else run_async(scenario)


def _follower_series(rows) -> dict:
    per_tick: dict = {}
    for r in rows:
        if r["role"] == "follower":
            per_tick.setdefault(r["tick"], []).append(r["centroid_deviation"])
    return {t: float(np.mean(v)) for t, v in per_tick.items()}


def _ratio(a: float, b: float) -> float:
    if a == b:
        return 1.0
    return a / b if b != 0 else float("inf")


_REQUIRED = {"tick", "agent", "role", "centroid_deviation"}


def compare(log_a, log_b) -> dict:
    """Per-tick and aggregate follower centroid deviation of two runs, with ``a / b`` ratios."""
    rows_a = read_log(log_a) if isinstance(log_a, (str, os.PathLike)) else [_record_dict(r) for r in log_a]
    rows_b = read_log(log_b) if isinstance(log_b, (str, os.PathLike)) else [_record_dict(r) for r in log_b]
    for name, rows in (("a", rows_a), ("b", rows_b)):
        for r in rows:
            missing = _REQUIRED - set(r)
            if missing:
                raise SchemaMismatch(f"log {name} record lacks {sorted(missing)}")
    sa, sb = _follower_series(rows_a), _follower_series(rows_b)
    if set(sa) != set(sb):
        raise SchemaMismatch("logs do not cover the same ticks")
    ticks = sorted(sa)
    mean_a = float(np.mean([sa[t] for t in ticks])) if ticks else 0.0
    mean_b = float(np.mean([sb[t] for t in ticks])) if ticks else 0.0
    return {
        "ticks": ticks,
        "deviation_a": [sa[t] for t in ticks],
        "deviation_b": [sb[t] for t in ticks],
        "ratio": [_ratio(sa[t], sb[t]) for t in ticks],
        "mean_a": mean_a,
        "mean_b": mean_b,
        "mean_ratio": _ratio(mean_a, mean_b),
        "max_a": max((sa[t] for t in ticks), default=0.0),
        "max_b": max((sb[t] for t in ticks), default=0.0),
    }


def write_comparison(table: dict, path) -> None:
    """CSV when ``path`` ends in ``.csv``, JSON otherwise."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "deviation_a", "deviation_b", "ratio"])
            for row in zip(table["ticks"], table["deviation_a"], table["deviation_b"], table["ratio"]):
                w.writerow(row)
        return
    path.write_text(json.dumps(table, indent=2) + "\n")


def reference_path(scenario: Scenario) -> dict:
    """Optimized leader paths, keyed by leader id."""
    refs = build_references(scenario)
    return {str(k): (None if v is None else np.asarray(v).tolist()) for k, v in refs.items()}

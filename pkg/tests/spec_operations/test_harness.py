import json
from dataclasses import replace

import numpy as np
import pytest

from flocknav import harness
from flocknav.coordination import TickRecord
from flocknav.harness import SchemaMismatch, compare, read_log, run, summarize, write_comparison
from flocknav.scenario import load_shipped


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lockstep")
    summary = run(load_shipped("paper_playpen"), "lockstep", out, ticks=40)
    return summary, read_log(out / "ticks.jsonl"), out


def test_duration_zero(tmp_path):
    summary = run(load_shipped("paper_playpen"), "lockstep", tmp_path, ticks=0)
    assert read_log(tmp_path / "ticks.jsonl") == []
    assert summary["records"] == 0 and summary["ticks"] == 0
    assert summary["solve_time_ms"]["mean"] == 0.0 and summary["solve_time_ms"]["count"] == 0
    assert summary["centroid_deviation"] == {"mean": 0.0, "max": 0.0, "per_agent_mean": {}}
    assert summary["budget_hits"] == 0
    assert json.loads((tmp_path / "summary.json").read_text())["records"] == 0


def test_one_record_per_agent_per_tick(short_run):
    summary, rows, _ = short_run
    assert summary["records"] == len(rows) == 40 * 3
    assert sorted({(r["tick"], r["agent"]) for r in rows}) == sorted((t, a) for t in range(40) for a in range(3))


def test_inputs_inside_box(short_run):
    summary, rows, _ = short_run
    sc = load_shipped("paper_playpen")
    assert summary["inputs_outside_box"] == 0
    for r in rows:
        assert sc.inputs.v_min <= r["input"][0] <= sc.inputs.v_max
        assert sc.inputs.omega_min <= r["input"][1] <= sc.inputs.omega_max


def test_centroid_deviation_self_consistent(short_run):
    _, rows, _ = short_run
    for t in range(40):
        tick = [r for r in rows if r["tick"] == t]
        P = np.array([r["state"][:2] for r in tick])
        c = P.mean(axis=0)
        for r, p in zip(tick, P):
            assert r["centroid_deviation"] == pytest.approx(float(np.linalg.norm(p - c)), abs=1e-12)


def test_min_separation_matches_recomputation(short_run):
    summary, rows, _ = short_run
    best = np.inf
    for t in range(40):
        P = np.array([r["state"][:2] for r in rows if r["tick"] == t])
        for i in range(len(P)):
            for j in range(i + 1, len(P)):
                best = min(best, float(np.sum((P[i] - P[j]) ** 2)))
    assert summary["min_separation"] == pytest.approx(best, abs=1e-12)


def test_summary_recomputes_from_disk(short_run):
    summary, rows, _ = short_run
    again = summarize(rows, load_shipped("paper_playpen"))
    assert again["digest"] == summary["digest"]
    assert again["centroid_deviation"] == summary["centroid_deviation"]


def test_vfh_followers_same_schema(tmp_path, short_run):
    _, rows, _ = short_run
    sc = load_shipped("paper_playpen")
    sc = sc.replace(agents=tuple(replace(a, controller="vfh") if a.role == "follower" else a for a in sc.agents))
    run(sc, "lockstep", tmp_path, ticks=5)
    vfh_rows = read_log(tmp_path / "ticks.jsonl")
    assert set(vfh_rows[0]) == set(rows[0]) == set(TickRecord.__dataclass_fields__)
    assert {r["controller"] for r in vfh_rows if r["role"] == "follower"} == {"vfh"}
    assert {r["controller"] for r in rows if r["role"] == "follower"} == {"nmpc"}


def test_compare_with_itself(short_run):
    _, _, out = short_run
    table = compare(out / "ticks.jsonl", out / "ticks.jsonl")
    assert table["ticks"] == list(range(40))
    assert table["ratio"] == [1.0] * 40
    assert table["mean_ratio"] == 1.0


def test_compare_disjoint_ticks(short_run):
    _, rows, _ = short_run
    shifted = [{**r, "tick": r["tick"] + 100} for r in rows]
    with pytest.raises(SchemaMismatch):
        compare(rows, shifted)


def test_compare_missing_field(short_run):
    _, rows, _ = short_run
    with pytest.raises(SchemaMismatch):
        compare(rows, [{k: v for k, v in r.items() if k != "centroid_deviation"} for r in rows])


def test_write_comparison_formats(tmp_path, short_run):
    _, rows, _ = short_run
    table = compare(rows, rows)
    write_comparison(table, tmp_path / "t.csv")
    write_comparison(table, tmp_path / "t.json")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "tick,deviation_a,deviation_b,ratio" and len(lines) == 41
    assert json.loads((tmp_path / "t.json").read_text())["mean_ratio"] == 1.0


def test_csv_export(tmp_path, short_run):
    _, rows, _ = short_run
    harness.export_csv(rows, tmp_path / "ticks.csv")
    lines = (tmp_path / "ticks.csv").read_text().splitlines()
    assert len(lines) == len(rows) + 1
    assert lines[0].split(",") == list(TickRecord.__dataclass_fields__)


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOCKNAV_OUT_DIR", str(tmp_path / "env"))
    run(load_shipped("paper_playpen"), "lockstep", ticks=2)
    assert len(read_log(tmp_path / "env" / "ticks.jsonl")) == 6


def test_unknown_mode(tmp_path):
    with pytest.raises(ValueError):
        run(load_shipped("paper_playpen"), "parallel", tmp_path, ticks=1)


def test_reference_path_starts_at_leader():
    sc = load_shipped("paper_playpen")
    ref = harness.reference_path(sc)
    pts = np.array(ref[str(sc.leaders[0].id)])
    assert np.allclose(pts[0], sc.leaders[0].pose[:2])
    assert pts.shape[1] == 2 and len(pts) > 10

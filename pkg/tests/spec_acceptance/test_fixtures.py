import json
from pathlib import Path

import pytest

from flocknav.coordination import run_lockstep
from flocknav.harness import summarize
from flocknav.scenario import load_scenario

FIXTURES = Path(__file__).parent / "fixtures"


def close(actual, expected):
    if isinstance(expected, dict):
        assert set(actual) == set(expected)
        for k in expected:
            close(actual[k], expected[k])
    elif isinstance(expected, float):
        assert actual == pytest.approx(expected, rel=1e-6, abs=1e-9)
    else:
        assert actual == expected


@pytest.mark.parametrize("name", sorted(p.stem for p in FIXTURES.glob("*.yaml")))
def test_fixture_summary(name):
    sc = load_scenario(FIXTURES / f"{name}.yaml")
    expected = json.loads((FIXTURES / f"{name}.expected.json").read_text())
    summary = summarize(run_lockstep(sc).records, sc)
    close({k: summary[k] for k in expected}, expected)

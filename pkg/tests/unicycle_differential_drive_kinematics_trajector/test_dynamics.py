import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flocknav.dynamics import (
    AgentState,
    ControlInput,
    InputSet,
    StateSet,
    project_input,
    rollout,
    rollout_arrays,
    rollout_vjp,
    states_from_rollout,
    step,
)

finite = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
speed = st.floats(-2, 2, allow_nan=False)


def test_step_axis_aligned():
    s = step(AgentState(0, 0, 0), ControlInput(1, 0), 0.1)
    assert s == AgentState(0.1, 0.0, 0.0, 1.0, 0.0)


def test_step_quarter_turn_heading():
    s = step(AgentState(0, 0, math.pi / 2), ControlInput(1, 0), 0.1)
    assert s.px == pytest.approx(0.0, abs=1e-15)
    assert s.py == pytest.approx(0.1)
    assert s.psi == math.pi / 2
    assert (s.vx, s.vy) == pytest.approx((0.0, 1.0), abs=1e-15)


def test_step_pure_rotation():
    s = step(AgentState(0, 0, 0), ControlInput(0, 1), 0.1)
    assert s == AgentState(0.0, 0.0, 0.1, 0.0, 0.0)


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        step(AgentState(0, 0, 0), ControlInput(1, 0), 0.0)


def test_rollout_length_one_is_step():
    x0 = AgentState(1.0, -2.0, 0.3, 0.2, 0.1)
    u = ControlInput(0.7, -0.4)
    assert rollout(x0, [u]) == [step(x0, u)]


def test_rollout_zero_inputs_stay_put():
    x0 = AgentState(1.0, 2.0, 0.5, 0.3, -0.2)
    for s in rollout(x0, [ControlInput(0, 0)] * 4):
        assert (s.px, s.py, s.psi, s.vx, s.vy) == (1.0, 2.0, 0.5, 0.0, 0.0)


def test_rollout_constant_speed_matches_repeated_step():
    states = rollout(AgentState(0, 0, 0), [ControlInput(1, 0)] * 10, 0.1)
    expected, s = [], AgentState(0, 0, 0)
    for _ in range(10):
        s = step(s, ControlInput(1, 0), 0.1)
        expected.append(s.px)
    assert [s.px for s in states] == expected
    assert [s.px for s in states] == pytest.approx([0.1 * k for k in range(1, 11)])


def test_rollout_needs_inputs():
    with pytest.raises(ValueError):
        rollout(AgentState(0, 0, 0), [])


def test_project_input_examples():
    box = InputSet()
    assert project_input(ControlInput(2.0, 0.0), box) == ControlInput(1.0, 0.0)
    assert project_input(ControlInput(0.5, -9.0), box) == ControlInput(0.5, -8.0)
    assert project_input(ControlInput(0.3, 1.0), box) == ControlInput(0.3, 1.0)


def test_default_input_bounds():
    box = InputSet()
    assert (box.v_min, box.v_max, box.omega_min, box.omega_max) == (-0.1, 1.0, -8.0, 8.0)


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        InputSet(v_min=1.0, v_max=0.0)
    with pytest.raises(ValueError):
        StateSet(x_min=1.0, x_max=0.0)


def test_state_set_checks_position_only():
    ws = StateSet(-1, 1, -1, 1)
    assert ws.contains(AgentState(0.5, -0.5, 100.0, 9.0, 9.0))
    assert not ws.contains(AgentState(1.5, 0.0, 0.0))


@given(st.lists(st.tuples(speed, angle), min_size=1, max_size=12), finite, finite, angle)
def test_rollout_recurrence_bitwise(inputs, px, py, psi):
    x0 = AgentState(px, py, psi)
    us = [ControlInput(v, w) for v, w in inputs]
    states = rollout(x0, us)
    assert states[0] == step(x0, us[0])
    for k in range(1, len(us)):
        assert states[k] == step(states[k - 1], us[k])


@given(st.lists(st.tuples(speed, angle), min_size=1, max_size=12), finite, finite, angle)
def test_array_rollout_matches_dataclass_rollout(inputs, px, py, psi):
    U = np.array(inputs, dtype=float)
    x0 = np.array([px, py, psi, 0.0, 0.0])
    X = states_from_rollout(x0, U, 0.1)
    ref = rollout(AgentState(px, py, psi), [ControlInput(v, w) for v, w in inputs])
    assert np.array_equal(X, np.array([s.as_array() for s in ref]))
    P, V, _, _ = rollout_arrays(x0, U, 0.1)
    assert np.allclose(P, X[:, :2], atol=1e-9)
    assert np.allclose(V, X[:, 3:], atol=1e-12)


@given(speed, angle)
def test_project_input_idempotent_and_inside(v, w):
    box = InputSet()
    once = project_input(ControlInput(v, w), box)
    assert box.contains(once)
    assert project_input(once, box) == once


@given(speed, angle, angle)
def test_planar_speed_equals_abs_v(v, w, psi):
    s = step(AgentState(0, 0, psi), ControlInput(v, w))
    assert math.hypot(s.vx, s.vy) == pytest.approx(abs(v), rel=1e-15, abs=1e-15)


def test_rollout_vjp_matches_finite_differences():
    from oracles import oracle_fd_gradient

    rng = np.random.default_rng(3)
    x0 = np.array([0.3, -0.2, 0.7, 0.0, 0.0])
    U = rng.uniform(-1, 1, (6, 2))
    gP = rng.normal(size=(6, 2))
    gV = rng.normal(size=(6, 2))

    def scalar(u):
        P, V, _, _ = rollout_arrays(x0, u.reshape(6, 2), 0.1)
        return float(np.sum(gP * P) + np.sum(gV * V))

    _, _, _, cs = rollout_arrays(x0, U, 0.1)
    g = rollout_vjp(U, cs, 0.1, gP, gV).reshape(-1)
    fd = oracle_fd_gradient(scalar, U.reshape(-1))
    assert np.max(np.abs(g - fd)) <= 1e-7

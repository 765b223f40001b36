import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flocknav import nmpc
from flocknav.dynamics import InputSet, StateSet, rollout_arrays
from flocknav.flocking import FlockParams, NeighborSnapshot
from flocknav.nmpc import NmpcProblem, NoNeighbors, assemble, shift_warm_start, solve_tick
from flocknav.solver import SolverConfig, Status
from nmpc_cases import random_problem

LONG = SolverConfig(time_budget=None)


def direct_problem(T=1, T_sep=1, x0=(0, 0, 0, 0, 0), neighbors=(), w_self=0.0, q=0.5, obstacles=(),
                   **flock):
    params = FlockParams(T=T, T_sep=T_sep, **flock)
    J = len(neighbors)
    pos = np.array([np.broadcast_to(p, (T, 2)) for p in neighbors]).reshape(J, T, 2)
    w = np.full(J, (1.0 - w_self) / J) if J else np.zeros(0)
    return NmpcProblem(x0=np.array(x0, dtype=float), params=params, input_set=InputSet(), state_set=StateSet(),
                       dt=0.1, q=q, w_self_p=w_self if J else 1.0, w_self_v=w_self if J else 1.0,
                       neighbor_ids=tuple(range(J)), neighbor_positions=pos, neighbor_velocities=np.zeros((J, T, 2)),
                       w_p=w, w_v=w, obstacle_points=np.asarray(obstacles, dtype=float).reshape(-1, 2))


def test_exact_tracking_zero_cost():
    # a neighbor sitting exactly on our own (stationary) predicted path
    p = direct_problem(T=10, T_sep=5, x0=(2.0, 1.0, 0.3, 0, 0), neighbors=[(2.0, 1.0)], w_self=0.5,
                       rho_sep=0.0)
    u = np.zeros(20)
    assert nmpc.cost(p, u) == 0.0
    assert np.all(nmpc.cost_gradient(p, u) == 0.0)


def test_single_step_tracking_value():
    p = direct_problem(T=1, neighbors=[(-1.0, 0.0)], w_self=0.0, q=0.5, gamma=1.0, R_diag=(0.0, 0.0))
    assert nmpc.cost(p, np.zeros(2)) == pytest.approx(0.5)


@pytest.mark.parametrize("offset,expected", [(0.8, 0.1296), (1.5 ** 0.5, 0.0)])
def test_soft_separation_penalty_value(offset, expected):
    kw = dict(T=7, T_sep=5, neighbors=[(offset, 0.0)], w_self=0.5, gamma=1.0, d_sep=1.0)
    with_pen = nmpc.cost(direct_problem(rho_sep=1.0, **kw), np.zeros(14))
    without = nmpc.cost(direct_problem(rho_sep=0.0, **kw), np.zeros(14))
    # only k = T - 1 = 6 lies in the soft range T_sep + 1 .. T - 1
    assert with_pen - without == pytest.approx(expected, abs=1e-12)


def test_effort_only_gradient():
    p = direct_problem(T=4, T_sep=2, R_diag=(0.3, 0.07))
    u = np.array([0.5, -1.0, 0.2, 3.0, -0.1, 0.0, 1.0, 7.5])
    R = np.tile([0.3, 0.07], 4)
    assert nmpc.cost(p, u) == pytest.approx(float(np.sum(R * u * u)))
    assert np.allclose(nmpc.cost_gradient(p, u), 2 * R * u)


def test_obstacle_violation_examples():
    far = direct_problem(T=3, T_sep=1, obstacles=[[50.0, 50.0]], r_s=0.5)
    assert np.all(nmpc.obstacle_violation(far, np.zeros(6)) == 0.0)
    on = direct_problem(T=3, T_sep=1, obstacles=[[0.0, 0.0]], r_s=0.5)
    assert np.allclose(nmpc.obstacle_violation(on, np.zeros(6)), 0.25)
    edge = direct_problem(T=1, T_sep=1, obstacles=[[0.5, 0.0]], r_s=0.5)
    assert nmpc.obstacle_violation(edge, np.zeros(2)).tolist() == [0.0]


def test_separation_violation_examples():
    assert nmpc.separation_violation(direct_problem(T=2, T_sep=2), np.zeros(4)).size == 0
    same = direct_problem(T=2, T_sep=2, neighbors=[(0.0, 0.0)], w_self=0.5)
    assert np.allclose(nmpc.separation_violation(same, np.zeros(4)), 1.44)
    apart = direct_problem(T=2, T_sep=2, neighbors=[(2.0 ** 0.5, 0.0)], w_self=0.5)
    assert np.allclose(nmpc.separation_violation(apart, np.zeros(4)), 0.0)


def test_assemble_counts_and_errors():
    T = 10
    snaps = [NeighborSnapshot(1, 0, np.ones((T, 2)) * 2, np.zeros((T, 2)), 0),
             NeighborSnapshot(2, 2, np.ones((T, 2)) * -2, np.zeros((T, 2)), 0)]
    obs = np.random.default_rng(0).uniform(-5, 5, (40, 2))
    p = assemble(np.zeros(5), snaps, obs, FlockParams(), InputSet(), StateSet(), 0.1, self_level=1)
    assert p.n_obstacle_terms == 40 * T
    assert np.argmax(p.w_p) == 0
    assert p.w_p[0] > p.w_self_p > p.w_p[1]
    with pytest.raises(NoNeighbors):
        assemble(np.zeros(5), [], obs, FlockParams(), InputSet(), StateSet(), 0.1, self_level=1)


def test_assemble_shifts_stale_snapshots():
    T = 10
    pos = np.column_stack([np.arange(1, T + 1, dtype=float), np.zeros(T)])
    snap = NeighborSnapshot(1, 0, pos, np.zeros((T, 2)), stamp=3)
    p = assemble(np.zeros(5), [snap], [], FlockParams(), InputSet(), StateSet(), 0.1, self_level=1, tick=5)
    assert p.neighbor_positions[0, :, 0].tolist() == [3, 4, 5, 6, 7, 8, 9, 10, 10, 10]


def test_shift_warm_start():
    prev = np.arange(8.0).reshape(4, 2)
    assert shift_warm_start(prev, 4).tolist() == [[2, 3], [4, 5], [6, 7], [6, 7]]
    assert shift_warm_start(None, 3).tolist() == [[0, 0]] * 3


def static_neighbor_problem():
    T = 10
    snap = NeighborSnapshot(1, 0, np.tile([2.0, 0.5], (T, 1)), np.zeros((T, 2)), 0)
    return assemble(np.zeros(5), [snap], [], FlockParams(), InputSet(), StateSet(), 0.1, self_level=1)


def test_free_space_solve_converges():
    sol = solve_tick(static_neighbor_problem(), LONG)
    assert sol.status is Status.CONVERGED
    assert sol.infeasibility <= 1e-4
    assert sol.inputs[0, 0] > 0


def test_zero_budget_returns_warm_start():
    warm = np.tile([2.0, -9.0], (10, 1))
    sol = solve_tick(static_neighbor_problem(), SolverConfig(time_budget=0.0), warm_start=warm, shift=False)
    assert sol.status is Status.BUDGET_EXHAUSTED
    assert np.array_equal(sol.inputs, np.tile([1.0, -8.0], (10, 1)))


def test_warm_started_cost_non_increasing():
    p, _ = random_problem(np.random.default_rng(11))
    cfg = SolverConfig(time_budget=None, max_outer_iters=2, max_inner_iters=15)
    sol = solve_tick(p, cfg)
    costs = [sol.cost]
    for _ in range(4):
        sol = solve_tick(p, cfg, warm_start=sol.inputs, shift=False)
        costs.append(sol.cost)
    for a, b in zip(costs, costs[1:]):
        assert b <= a + 1e-9


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_solution_consistent_with_rollout(seed):
    p, _ = random_problem(np.random.default_rng(seed))
    sol = solve_tick(p, SolverConfig(time_budget=None, max_outer_iters=3))
    P, V, _, _ = rollout_arrays(p.x0, sol.inputs, p.dt)
    assert np.array_equal(sol.positions, P)
    assert np.array_equal(sol.velocities, V)
    assert np.all(sol.inputs >= p.input_set.lower) and np.all(sol.inputs <= p.input_set.upper)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50), st.floats(-50, 50))
def test_cost_translation_invariant(seed, tx, ty):
    p, u = random_problem(np.random.default_rng(seed))
    shift = np.array([tx, ty])
    moved = NmpcProblem(x0=p.x0 + np.r_[shift, 0, 0, 0], params=p.params, input_set=p.input_set,
                        state_set=StateSet(-1e3, 1e3, -1e3, 1e3), dt=p.dt, q=p.q, w_self_p=p.w_self_p,
                        w_self_v=p.w_self_v, neighbor_ids=p.neighbor_ids,
                        neighbor_positions=p.neighbor_positions + shift, neighbor_velocities=p.neighbor_velocities,
                        w_p=p.w_p, w_v=p.w_v, obstacle_points=p.obstacle_points + shift)
    assert nmpc.cost(moved, u) == pytest.approx(nmpc.cost(p, u), rel=1e-9, abs=1e-9)


def grid_first_input(problem, n=81):
    """Brute-force optimum for a one-step horizon over a grid of the input box."""
    box = problem.input_set
    best = None
    for v, w in itertools.product(np.linspace(box.v_min, box.v_max, n), np.linspace(-1.0, 1.0, 21)):
        u = np.array([v, w])
        c = nmpc.cost(problem, u)
        if best is None or c < best[0]:
            best = (c, u)
    return best


@pytest.mark.parametrize("target", [(0.05, 0.0), (0.08, 0.02), (-0.2, 0.0)])
def test_doubling_effort_weight_shrinks_optimal_input(target):
    kw = dict(T=1, T_sep=1, neighbors=[target], w_self=0.0, rho_sep=0.0, d_sep=1e-6, gamma=1.0)
    norms = []
    for R in ((0.1, 0.1), (0.2, 0.2), (0.4, 0.4)):
        p = direct_problem(R_diag=R, **kw)
        sol = solve_tick(p, LONG)
        grid_cost, grid_u = grid_first_input(p)
        assert sol.cost <= grid_cost + 1e-6
        norms.append(float(np.linalg.norm(sol.inputs[0])))
    assert norms[0] >= norms[1] - 1e-6 >= norms[2] - 2e-6


def test_restart_turns_toward_target_behind():
    T = 10
    snap = NeighborSnapshot(1, 0, np.tile([-3.0, 0.0], (T, 1)), np.zeros((T, 2)), 0)
    p = assemble(np.zeros(5), [snap], [], FlockParams(R_diag=(0.1, 0.001)), InputSet(), StateSet(), 0.1,
                 self_level=1)
    assert nmpc.target_behind(p)
    seed = nmpc.turn_seed(p)
    assert np.all(seed[:, 0] >= 0)
    assert abs(float(np.sum(seed[:, 1])) * 0.1) == pytest.approx(np.pi)
    with_restart = solve_tick(p, LONG)
    without = solve_tick(p, LONG, restart=False)
    assert with_restart.cost <= without.cost + 1e-9

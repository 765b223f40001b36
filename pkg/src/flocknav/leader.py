"""Leader: admissible reference path over waypoints plus a reactive tracking law."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional

import numpy as np

from .dynamics import DEFAULT_DT, AgentState, ControlInput, InputSet, project_input, rollout_arrays, rollout_vjp
from .flocking import NeighborSnapshot
from .solver import BoxProblem, SolverConfig, Status, inner_solve

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class WaypointPath:
    waypoints: tuple
    spacing: float = 0.1

    def __post_init__(self):
        pts = tuple(tuple(float(c) for c in w) for w in self.waypoints)
        if len(pts) < 2:
            raise ValueError("a path needs at least two waypoints")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "waypoints", pts)


@dataclass(frozen=True)
class LeaderGains:
    K_v: float = 0.6
    K_psi: float = 2.0

    def __post_init__(self):
        if not (self.K_v > 0 and self.K_psi > 0):
            raise ValueError("gains must be positive")


@dataclass
class ReferenceTrajectory:
    points: np.ndarray
    q_p: float
    q_u: float
    q_T: float
    inputs: Optional[np.ndarray] = None
    status: Status = Status.CONVERGED
    cost: float = 0.0

    def __len__(self):
        return self.points.shape[0]


def interpolate(path: WaypointPath) -> np.ndarray:
    """Points every ``spacing`` meters along each segment, waypoints included."""
    wps = np.asarray(path.waypoints, dtype=float)
    out = [wps[0]]
    for a, b in zip(wps[:-1], wps[1:]):
        seg = b - a
        length = float(np.hypot(*seg))
        if length == 0.0:
            continue
        n = int(math.floor(length / path.spacing + 1e-9))
        for i in range(1, n + 1):
            s = i * path.spacing
            if length - s > 1e-9:
                out.append(a + seg * (s / length))
        out.append(b)
    return np.array(out)


def _reference_cost(x0, targets, q_p, q_u, q_T, dt):
    T = targets.shape[0]

    def value_grad(u):
        U = u.reshape(T, 2)
        P, _, _, cs = rollout_arrays(x0, U, dt)
        e = P - targets
        w = np.full(T, q_p)
        w[-1] += q_T
        value = float(w @ np.einsum("kd,kd->k", e, e)) + q_u * float(u @ u)
        g = rollout_vjp(U, cs, dt, 2.0 * w[:, None] * e) + 2.0 * q_u * U
        return value, g.reshape(-1)

    return value_grad


def optimize_reference(points, weights=(10.0, 0.1, 100.0), dt: float = DEFAULT_DT,
                       input_set: InputSet = InputSet(), x0=None,
                       config: Optional[SolverConfig] = None) -> ReferenceTrajectory:
    """Fit an input sequence whose rollout follows ``points`` one step per point.

    ``x0`` defaults to the first point facing the second.  The returned
    ``points`` start with the initial position followed by the rollout.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        raise ValueError("need at least two reference points")
    q_p, q_u, q_T = weights
    if x0 is None:
        d = pts[1] - pts[0]
        x0 = np.array([pts[0, 0], pts[0, 1], math.atan2(d[1], d[0]), 0.0, 0.0])
    x0 = np.asarray(x0, dtype=float)
    targets = pts[1:]
    T = targets.shape[0]
    vg = _reference_cost(x0, targets, q_p, q_u, q_T, dt)
    problem = BoxProblem(cost=lambda u: vg(u)[0], grad=lambda u: vg(u)[1],
                         lower=np.tile(input_set.lower, T), upper=np.tile(input_set.upper, T),
                         cost_grad=vg)
    cfg = config or SolverConfig(time_budget=None, max_inner_iters=5000)
    # start from the speed that matches the point spacing
    step = np.linalg.norm(np.diff(pts, axis=0), axis=1) / dt
    u0 = np.column_stack([step, np.zeros(T)]).reshape(-1)
    res = inner_solve(problem, problem.project(u0), cfg)
    U = res.x.reshape(T, 2)
    P, _, _, _ = rollout_arrays(x0, U, dt)
    return ReferenceTrajectory(points=np.vstack([x0[:2], P]), q_p=q_p, q_u=q_u, q_T=q_T,
                               inputs=U, status=res.status, cost=res.cost)


def wrap(theta: float) -> float:
    """Angle reduced into ``[0, 2*pi)``."""
    r = theta % TWO_PI
    # rounding can land exactly on 2*pi for tiny negative inputs
    return 0.0 if r >= TWO_PI else r


def wrap_signed(theta: float) -> float:
    """Angle reduced into ``(-pi, pi]``."""
    r = wrap(theta)
    return r - TWO_PI if r > math.pi else r


def reactive_control(p_hat, state: AgentState, gains: LeaderGains = LeaderGains(),
                     input_set: InputSet = InputSet(), heading_wrap: str = "unsigned") -> ControlInput:
    """Proportional speed on squared distance, proportional yaw rate on wrapped heading error.

    ``heading_wrap="unsigned"`` reduces the error into ``[0, 2*pi)``;
    ``"signed"`` uses ``(-pi, pi]`` and turns the short way.
    """
    d = np.asarray(p_hat, dtype=float) - np.array([state.px, state.py])
    dist2 = float(d @ d)
    if dist2 == 0.0:
        return project_input(ControlInput(0.0, 0.0), input_set)
    psi_hat = math.atan2(d[1], d[0])
    err = psi_hat - state.psi
    if heading_wrap == "unsigned":
        err = wrap(err)
    elif heading_wrap == "signed":
        err = wrap_signed(err)
    else:
        raise ValueError(f"unknown heading_wrap {heading_wrap!r}")
    return project_input(ControlInput(gains.K_v * dist2, gains.K_psi * err), input_set)


def leader_predict(state: AgentState, current_input: ControlInput, T: int, dt: float = DEFAULT_DT,
                   agent_id: Hashable = 0, stamp: int = 0) -> NeighborSnapshot:
    """Constant-input rollout published as a hierarchy-0 snapshot."""
    x0 = state.as_array()
    U = np.tile(current_input.as_array(), (T, 1))
    P, V, _, _ = rollout_arrays(x0, U, dt)
    return NeighborSnapshot(id=agent_id, hierarchy=0, positions=P, velocities=V, stamp=stamp,
                            position=x0[:2].copy(), velocity=x0[3:5].copy())


@dataclass
class LeaderTracker:
    """Per-leader target index over a reference path.

    The index advances once per tick.  ``hold_lag`` (meters) freezes it while
    the leader is farther than that from the current target; ``None`` never
    holds.
    """

    points: np.ndarray
    gains: LeaderGains = LeaderGains()
    input_set: InputSet = InputSet()
    heading_wrap: str = "unsigned"
    hold_lag: Optional[float] = None
    index: int = 0
    _started: bool = field(default=False, repr=False)

    def target(self) -> np.ndarray:
        return self.points[min(self.index, len(self.points) - 1)]

    def control(self, state: AgentState) -> ControlInput:
        if self._started:
            lagging = (self.hold_lag is not None
                       and float(np.hypot(*(self.target() - [state.px, state.py]))) > self.hold_lag)
            if not lagging:
                self.index = min(self.index + 1, len(self.points) - 1)
        self._started = True
        return reactive_control(self.target(), state, self.gains, self.input_set, self.heading_wrap)

    @property
    def finished(self) -> bool:
        return self.index >= len(self.points) - 1

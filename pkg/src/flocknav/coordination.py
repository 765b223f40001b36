"""Running a flock: per-agent controllers, range-limited message exchange, schedulers.

Agents never read each other's state.  Everything one agent knows about
another arrives as an immutable :class:`PredictionMessage` through a
:class:`Mailbox`.  Only the scheduler advances the world.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional

import numpy as np

from . import flocking, nmpc, pointcloud
from .dynamics import AgentState, ControlInput, project_input, rollout_arrays, step
from .flocking import NeighborSnapshot
from .leader import LeaderTracker, interpolate, leader_predict, optimize_reference, WaypointPath
from .pointcloud import Pose
from .scenario import AgentSpec, Scenario
from .solver import NonFiniteCost, SolverConfig
from .vfh import VfhGains, vfh_follower_step
from .world import compile_world, raycast, _clearances


@dataclass(frozen=True)
class PredictionMessage:
    """Outputs ``k`` are the sender's predicted position/velocity at ``tick + k + 1``."""

    sender: Hashable
    hierarchy: int
    positions: tuple
    velocities: tuple
    tick: int
    position: tuple
    velocity: tuple

    @classmethod
    def build(cls, sender, hierarchy, positions, velocities, tick, position, velocity):
        tup = lambda a: tuple(map(tuple, np.asarray(a, dtype=float).reshape(-1, 2).tolist()))
        return cls(sender, int(hierarchy), tup(positions), tup(velocities), int(tick),
                   tuple(np.asarray(position, dtype=float).tolist()),
                   tuple(np.asarray(velocity, dtype=float).tolist()))

    @property
    def horizon(self) -> int:
        return len(self.positions)

    def snapshot(self) -> NeighborSnapshot:
        return NeighborSnapshot(self.sender, self.hierarchy, np.array(self.positions), np.array(self.velocities),
                                self.tick, np.array(self.position), np.array(self.velocity))


class Mailbox:
    """Newest message per sender.  An older message never replaces a newer one."""

    def __init__(self):
        self._latest: dict = {}

    def publish(self, msg: PredictionMessage) -> None:
        held = self._latest.get(msg.sender)
        if held is None or msg.tick >= held.tick:
            self._latest[msg.sender] = msg

    def collect(self, self_id, neighbor_ids: Iterable) -> list:
        wanted = set(neighbor_ids) - {self_id}
        return [self._latest[j].snapshot() for j in sorted(wanted, key=_id_key) if j in self._latest]

    def latest(self, sender) -> Optional[PredictionMessage]:
        return self._latest.get(sender)

    def __len__(self):
        return len(self._latest)


def _id_key(x):
    return (isinstance(x, str), str(x) if isinstance(x, str) else x)


def neighbors_in_range(self_id, all_positions: dict, detection_range: float) -> set:
    p = np.asarray(all_positions[self_id], dtype=float)
    out = set()
    for j, q in all_positions.items():
        if j == self_id:
            continue
        if float(np.hypot(*(np.asarray(q, dtype=float) - p))) <= detection_range:
            out.add(j)
    return out


# ---------------------------------------------------------------------------
# per-tick records


@dataclass
class TickRecord:
    tick: int
    agent: Hashable
    role: str
    controller: str
    state: list
    input: list
    hierarchy: int
    solve_time_ms: Optional[float] = None
    status: Optional[str] = None
    infeasibility: Optional[float] = None
    obstacle_points: Optional[int] = None
    min_separation: Optional[float] = None
    min_clearance: Optional[float] = None
    centroid_deviation: Optional[float] = None
    staleness: Optional[int] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# fields that depend on the machine rather than the computation
WALL_CLOCK_FIELDS = ("solve_time_ms",)


@dataclass
class EpisodeLog:
    scenario: str
    mode: str
    records: list = field(default_factory=list)

    def by_tick(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault(r.tick, []).append(r)
        return out


# ---------------------------------------------------------------------------
# controllers


class AgentController:
    """Everything one agent owns: its state estimate, hierarchy, plan and warm start."""

    def __init__(self, spec: AgentSpec, scenario: Scenario, reference: Optional[np.ndarray] = None):
        self.spec = spec
        self.id = spec.id
        self.sc = scenario
        self.params = scenario.flock
        self.level = 0 if spec.role == "leader" else scenario.flock.pi_bar
        self.plan: Optional[np.ndarray] = None   # (T, 2) inputs
        self.plan_tick = 0
        self.last_input = ControlInput(0.0, 0.0)
        self.tracker = None
        if spec.role == "leader":
            pts = reference if reference is not None else np.array([spec.pose[:2]])
            lc = scenario.leader
            self.tracker = LeaderTracker(pts, lc.gains, scenario.inputs, lc.heading_wrap, lc.hold_lag)
        self.vfh_gains = VfhGains(scenario.vfh.sector_count, scenario.vfh.threshold, scenario.vfh.lookahead,
                                  scenario.leader.gains, scenario.leader.heading_wrap)

    @property
    def is_leader(self) -> bool:
        return self.spec.role == "leader"

    def update_level(self, mailbox: Mailbox, neighbor_ids) -> int:
        levels = [mailbox.latest(j).hierarchy for j in neighbor_ids if mailbox.latest(j) is not None]
        self.level = flocking.update_hierarchy(self.spec.role, levels, self.params.pi_bar)
        return self.level

    def planned_inputs(self, tick: int) -> np.ndarray:
        """The current plan re-indexed to start at ``tick`` (last input held)."""
        T = self.params.T
        if self.plan is None:
            return np.tile(self.last_input.as_array(), (T, 1))
        idx = np.minimum(np.arange(T) + (tick - self.plan_tick), T - 1)
        return self.plan[idx]

    def prediction(self, state: AgentState, tick: int, leader_input: Optional[ControlInput] = None):
        T = self.params.T
        if self.is_leader:
            snap = leader_predict(state, leader_input, T, self.sc.dt, self.id, tick)
            return PredictionMessage.build(self.id, 0, snap.positions, snap.velocities, tick,
                                           snap.position, snap.velocity)
        U = self.planned_inputs(tick)
        x0 = state.as_array()
        P, V, _, _ = rollout_arrays(x0, U, self.sc.dt)
        return PredictionMessage.build(self.id, self.level, P, V, tick, x0[:2], x0[3:5])

    def follower_solve(self, state: AgentState, snapshots, scan, tick: int, config: SolverConfig) -> dict:
        """Run one follower decision.  Returns the plan and the fields logged for it."""
        sc = self.sc
        info: dict = {"staleness": None, "obstacle_points": None, "solve_time_ms": None,
                      "infeasibility": None}
        held = project_input(self.last_input, sc.inputs)
        if not snapshots:
            info["status"] = "NoNeighbors"
            return {"plan": None, "input": held, **info}
        pose = Pose.planar(state.px, state.py, state.psi)
        wp = flocking.position_weights({self.id: self.level, **{s.id: s.hierarchy for s in snapshots}})
        p_bar = wp[self.id] * np.array([state.px, state.py]) + sum(wp[s.id] * s.position for s in snapshots)
        cloud = pointcloud.process(scan, pose, p_bar, np.array([s.position for s in snapshots]),
                                   self.params.f_s, self.params.r_b)
        info["obstacle_points"] = int(cloud.points.shape[0])
        info["staleness"] = int(max(tick - s.stamp for s in snapshots))
        if self.spec.controller == "vfh":
            u = vfh_follower_step(scan, state, snapshots, self.vfh_gains, sc.inputs)
            info["status"] = "Vfh"
            return {"plan": None, "input": u, **info}
        problem = nmpc.assemble(state.as_array(), snapshots, cloud.points, self.params, sc.inputs,
                                sc.workspace, sc.dt, self_level=self.level, self_id=self.id, tick=tick)
        warm = None if self.plan is None else self.planned_inputs(tick)
        try:
            sol = nmpc.solve_tick(problem, config, warm_start=warm, shift=False)
        except (NonFiniteCost, FloatingPointError, np.linalg.LinAlgError):
            info["status"] = "SolverFailure"
            return {"plan": None, "input": held, **info}
        info.update(status=sol.status.value, solve_time_ms=sol.solve_time, infeasibility=sol.infeasibility)
        u = ControlInput(float(sol.inputs[0, 0]), float(sol.inputs[0, 1]))
        return {"plan": sol.inputs, "input": u, **info}


def build_references(scenario: Scenario) -> dict:
    refs = {}
    lc = scenario.leader
    for a in scenario.leaders:
        if not a.waypoints:
            refs[a.id] = None
            continue
        pts = interpolate(WaypointPath(a.waypoints, lc.spacing))
        if lc.optimize:
            ref = optimize_reference(pts, lc.weights, scenario.dt, scenario.inputs, x0=_initial_state(a).as_array())
            refs[a.id] = ref.points
        else:
            refs[a.id] = pts
    return refs


def _initial_state(a: AgentSpec) -> AgentState:
    return AgentState(float(a.pose[0]), float(a.pose[1]), float(a.pose[2]))


class _World:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.static = list(scenario.world)
        self.geometry = compile_world(self.static)

    def scan(self, agent_id, states: dict):
        others = [s for j, s in states.items() if j != agent_id]
        geo = compile_world(self.static + [_agent_circle(s, self.sc.flock.r_b) for s in others])
        s = states[agent_id]
        return raycast(Pose.planar(s.px, s.py, s.psi), geo, self.sc.sensor)

    def metrics(self, states: dict) -> dict:
        ids = list(states)
        P = np.array([[states[j].px, states[j].py] for j in ids])
        centroid = P.mean(axis=0)
        clear = _clearances(P, self.geometry)
        out = {}
        for n, j in enumerate(ids):
            d2 = np.sum((P - P[n]) ** 2, axis=1)
            d2[n] = np.inf
            out[j] = {
                "min_separation": float(d2.min()) if len(ids) > 1 else None,
                "min_clearance": float(clear[n]) if np.isfinite(clear[n]) else None,
                "centroid_deviation": float(np.hypot(*(P[n] - centroid))),
            }
        return out


def _agent_circle(s: AgentState, radius: float):
    from .world import Circle
    return Circle((s.px, s.py), radius)


def _record(tick, ctrl, state, u, metrics, info=None):
    info = info or {}
    return TickRecord(
        tick=tick, agent=ctrl.id, role=ctrl.spec.role, controller=ctrl.spec.controller,
        state=state.as_array().tolist(), input=[u.v, u.omega], hierarchy=ctrl.level,
        solve_time_ms=info.get("solve_time_ms"), status=info.get("status"),
        infeasibility=info.get("infeasibility"), obstacle_points=info.get("obstacle_points"),
        staleness=info.get("staleness"), **metrics,
    )


def _positions(states: dict) -> dict:
    return {j: (s.px, s.py) for j, s in states.items()}


def run_lockstep(scenario: Scenario, ticks: Optional[int] = None, on_record=None) -> EpisodeLog:
    """Synchronized sense/publish, barrier, collect/solve/apply, barrier, integrate."""
    ticks = scenario.ticks if ticks is None else ticks
    config = scenario.solver if scenario.lockstep_budget else _unbudgeted(scenario.solver)
    refs = build_references(scenario)
    nmpc.warm_up()
    ctrls = {a.id: AgentController(a, scenario, refs.get(a.id)) for a in scenario.agents}
    states = {a.id: _initial_state(a) for a in scenario.agents}
    world = _World(scenario)
    mailbox = Mailbox()
    log = EpisodeLog(scenario.name, "lockstep")
    rng_range = scenario.flock.detection_range

    for t in range(ticks):
        pos = _positions(states)
        nbrs = {j: neighbors_in_range(j, pos, rng_range) for j in ctrls}
        # phase 1: sense, update hierarchy from last tick's messages, publish
        scans, leader_u = {}, {}
        for j, c in ctrls.items():
            c.update_level(mailbox, nbrs[j])
        for j, c in ctrls.items():
            if c.is_leader:
                leader_u[j] = c.tracker.control(states[j])
            else:
                scans[j] = world.scan(j, states)
        for j, c in ctrls.items():
            mailbox.publish(c.prediction(states[j], t, leader_u.get(j)))
        # phase 3: collect, solve, choose input
        applied, infos = {}, {}
        for j, c in ctrls.items():
            if c.is_leader:
                applied[j], infos[j] = leader_u[j], {"status": "Leader"}
                continue
            out = c.follower_solve(states[j], mailbox.collect(j, nbrs[j]), scans[j], t, config)
            applied[j] = out["input"]
            infos[j] = {k: v for k, v in out.items() if k not in ("plan", "input")}
            if out["plan"] is not None:
                c.plan, c.plan_tick = out["plan"], t
            elif c.spec.controller == "nmpc":
                c.plan = None
        metrics = world.metrics(states)
        for j, c in ctrls.items():
            c.last_input = applied[j]
            rec = _record(t, c, states[j], applied[j], metrics[j], infos[j])
            log.records.append(rec)
            if on_record is not None:
                on_record(rec)
        # phase 5: integrate
        states = {j: step(states[j], applied[j], scenario.dt) for j in ctrls}
    return log


def _unbudgeted(config: SolverConfig) -> SolverConfig:
    from dataclasses import replace
    return replace(config, time_budget=None)


def run_async(scenario: Scenario, duration: Optional[int] = None, seed: Optional[int] = None,
              on_record=None, wall_clock: Optional[bool] = None) -> EpisodeLog:
    """Simulated-time asynchronous execution.

    The world integrates on a fixed tick clock with each agent's held plan.
    A follower that is idle at tick ``b`` senses, collects whatever messages
    have arrived and starts a solve that takes a random latency (or the
    measured solve time when ``wall_clock`` is set).  The result becomes the
    agent's plan, and is published, at the first tick boundary after it is
    ready, so neighbors generally see it one or more ticks late.
    """
    ticks = scenario.ticks if duration is None else duration
    seed = scenario.seed if seed is None else seed
    wall = scenario.async_.wall_clock if wall_clock is None else wall_clock
    rng = np.random.default_rng(seed)
    config = scenario.solver
    dt_ms = scenario.dt * 1000.0
    refs = build_references(scenario)
    nmpc.warm_up()
    ctrls = {a.id: AgentController(a, scenario, refs.get(a.id)) for a in scenario.agents}
    states = {a.id: _initial_state(a) for a in scenario.agents}
    world = _World(scenario)
    mailbox = Mailbox()
    log = EpisodeLog(scenario.name, "async")
    pending: list = []   # heap of (ready_tick, order, agent id, result, started_tick)
    busy: set = set()
    order = 0

    for t in range(ticks):
        pos = _positions(states)
        nbrs = {j: neighbors_in_range(j, pos, scenario.flock.detection_range) for j in ctrls}
        # deliver finished solves
        while pending and pending[0][0] <= t:
            _, _, j, out, started = heapq.heappop(pending)
            c = ctrls[j]
            if out["plan"] is not None:
                c.plan, c.plan_tick = out["plan"], started
            elif c.spec.controller == "vfh":
                c.plan, c.plan_tick = np.tile(out["input"].as_array(), (scenario.flock.T, 1)), started
            else:
                c.plan = None
                c.last_input = out["input"]
            busy.discard(j)
            if c.plan is not None:
                U = c.plan
                x0 = out["state"].as_array()
                P, V, _, _ = rollout_arrays(x0, U, scenario.dt)
                mailbox.publish(PredictionMessage.build(j, c.level, P, V, started, x0[:2], x0[3:5]))
        infos: dict = {j: {} for j in ctrls}
        leader_u = {}
        for j, c in ctrls.items():
            if c.is_leader:
                c.update_level(mailbox, nbrs[j])
                leader_u[j] = c.tracker.control(states[j])
                mailbox.publish(c.prediction(states[j], t, leader_u[j]))
                infos[j] = {"status": "Leader"}
        for j, c in ctrls.items():
            if c.is_leader or j in busy:
                continue
            c.update_level(mailbox, nbrs[j])
            scan = world.scan(j, states)
            t0 = time.perf_counter()
            out = c.follower_solve(states[j], mailbox.collect(j, nbrs[j]), scan, t, config)
            measured = (time.perf_counter() - t0) * 1000.0
            latency = measured if wall else float(rng.uniform(scenario.async_.latency_min_ms,
                                                              scenario.async_.latency_max_ms))
            ready = t + max(1, math.ceil(latency / dt_ms - 1e-12))
            out["state"] = states[j]
            order += 1
            heapq.heappush(pending, (ready, order, j, out, t))
            busy.add(j)
            infos[j] = {k: v for k, v in out.items() if k not in ("plan", "input", "state")}
        applied = {}
        for j, c in ctrls.items():
            if c.is_leader:
                applied[j] = leader_u[j]
            elif c.plan is not None:
                u = c.planned_inputs(t)[0]
                applied[j] = project_input(ControlInput(float(u[0]), float(u[1])), scenario.inputs)
            else:
                applied[j] = project_input(c.last_input, scenario.inputs)
        metrics = world.metrics(states)
        for j, c in ctrls.items():
            c.last_input = applied[j]
            rec = _record(t, c, states[j], applied[j], metrics[j], infos[j])
            log.records.append(rec)
            if on_record is not None:
                on_record(rec)
        states = {j: step(states[j], applied[j], scenario.dt) for j in ctrls}
    return log

"""Scenario files: a YAML document describing world, agents and tuning.

Grammar (every section except ``agents`` is optional; unknown keys are errors)::

    name: str
    dt: float                    # seconds per tick
    ticks: int                   # episode length
    seed: int
    lockstep_budget: bool        # enforce solver.time_budget in lockstep runs
    flock:     {T, T_sep, gamma, rho_sep, beta, q_st, c, pi_bar, d_sep, r_s, r_b,
                R_diag: [r_v, r_omega], detection_range, f_s, sep_margin}
    solver:    {epsilon, delta, lambda0, rho, max_inner_iters, max_outer_iters,
                lbfgs_memory, time_budget, sufficient_decrease, grow_after}
    sensor:    {beams, range_max, angle_min}
    inputs:    {v_min, v_max, omega_min, omega_max}
    workspace: {x_min, x_max, y_min, y_max}
    leader:    {spacing, weights: [q_p, q_u, q_T], K_v, K_psi, heading_wrap, hold_lag,
                optimize: bool}
    vfh:       {sector_count, threshold, lookahead}
    async:     {latency_min_ms, latency_max_ms, wall_clock}
    world:     list of {circle: {center: [x, y], radius}}
                       | {segment: {a: [x, y], b: [x, y]}}
                       | {rectangle: {min: [x, y], max: [x, y]}}
    agents:    list of {id, role: leader|follower, controller: nmpc|vfh|reactive,
                        pose: [x, y, psi], waypoints: [[x, y], ...]}

Leaders use the reactive controller and may carry waypoints; an agent with
no waypoints stays put.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .dynamics import InputSet, StateSet
from .flocking import FlockParams
from .leader import LeaderGains
from .solver import SolverConfig
from .world import Circle, Rectangle, Segment, SensorSpec


class ParseError(ValueError):
    """Malformed file, wrong type, or unknown key; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class ValidationError(ValueError):
    """The scenario parses but violates an invariant; ``invariant`` names it."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class LeaderConfig:
    spacing: float = 0.1
    weights: tuple = (10.0, 0.1, 100.0)
    K_v: float = 0.6
    K_psi: float = 2.0
    heading_wrap: str = "unsigned"
    hold_lag: Optional[float] = None
    optimize: bool = True

    @property
    def gains(self) -> LeaderGains:
        return LeaderGains(self.K_v, self.K_psi)


@dataclass(frozen=True)
class VfhConfig:
    sector_count: int = 36
    threshold: float = 1.0
    lookahead: float = 1.0


@dataclass(frozen=True)
class AsyncConfig:
    latency_min_ms: float = 20.0
    latency_max_ms: float = 150.0
    wall_clock: bool = False


@dataclass(frozen=True)
class AgentSpec:
    id: Any
    role: str
    controller: str
    pose: tuple
    waypoints: Optional[tuple] = None


@dataclass(frozen=True)
class Scenario:
    agents: tuple
    name: str = "unnamed"
    dt: float = 0.1
    ticks: int = 600
    seed: int = 0
    lockstep_budget: bool = False
    flock: FlockParams = FlockParams()
    solver: SolverConfig = SolverConfig()
    sensor: SensorSpec = SensorSpec()
    inputs: InputSet = InputSet()
    workspace: StateSet = StateSet()
    leader: LeaderConfig = LeaderConfig()
    vfh: VfhConfig = VfhConfig()
    async_: AsyncConfig = AsyncConfig()
    world: tuple = ()

    def agent(self, agent_id) -> AgentSpec:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def leaders(self) -> list:
        return [a for a in self.agents if a.role == "leader"]

    @property
    def followers(self) -> list:
        return [a for a in self.agents if a.role == "follower"]

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "flock": FlockParams,
    "solver": SolverConfig,
    "sensor": SensorSpec,
    "inputs": InputSet,
    "workspace": StateSet,
    "leader": LeaderConfig,
    "vfh": VfhConfig,
    "async": AsyncConfig,
}
_SCALARS = {"name": str, "dt": float, "ticks": int, "seed": int, "lockstep_budget": bool}
_TOP = set(_SECTIONS) | set(_SCALARS) | {"world", "agents"}
_TUPLE_FIELDS = {"R_diag", "weights"}


# ---------------------------------------------------------------------------
# node-tree line lookup


def _key_line(root, path) -> Optional[int]:
    node = root
    line = None
    for part in path:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(part):
                    line = k.start_mark.line + 1
                    node = v
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


class _Ctx:
    def __init__(self, root):
        self.root = root

    def fail(self, path, message):
        raise ParseError(message, _key_line(self.root, path), ".".join(str(p) for p in path))


def _coerce(ctx, path, value, typ, optional=False):
    if value is None:
        if not optional:
            ctx.fail(path, "a value is required")
        return None
    if typ is bool:
        if not isinstance(value, bool):
            ctx.fail(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            ctx.fail(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            ctx.fail(path, f"expected a string, got {value!r}")
        return value
    return value


def _field_type(f: dataclasses.Field):
    t = str(f.type)
    optional = t.startswith("Optional[")
    if optional:
        t = t[len("Optional["):-1]
    return {"bool": bool, "int": int, "float": float, "str": str}.get(t), optional


def _vector(ctx, path, value, n):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        ctx.fail(path, f"expected a list of {n} numbers")
    return tuple(_coerce(ctx, path + [i], v, float) for i, v in enumerate(value))


def _section(ctx, name, cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        ctx.fail([name], "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            ctx.fail([name, key], f"unknown key {key!r} in section {name!r}")
        if key in _TUPLE_FIELDS:
            n = len(getattr(cls(), key))
            kwargs[key] = _vector(ctx, [name, key], value, n)
        else:
            kwargs[key] = _coerce(ctx, [name, key], value, *_field_type(fields[key]))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ValidationError(f"{name} section", str(exc)) from None


def _obstacle(ctx, i, item):
    path = ["world", i]
    if not isinstance(item, dict) or len(item) != 1:
        ctx.fail(path, "each obstacle is a one-key mapping: circle, segment or rectangle")
    (kind, body), = item.items()
    if not isinstance(body, dict):
        ctx.fail(path + [kind], "expected a mapping")
    keys = {"circle": ("center", "radius"), "segment": ("a", "b"), "rectangle": ("min", "max")}
    if kind not in keys:
        ctx.fail(path + [kind], f"unknown obstacle kind {kind!r}")
    for key in body:
        if key not in keys[kind]:
            ctx.fail(path + [kind, key], f"unknown key {key!r} in {kind}")
    missing = [k for k in keys[kind] if k not in body]
    if missing:
        ctx.fail(path + [kind], f"{kind} is missing {', '.join(missing)}")
    try:
        if kind == "circle":
            return Circle(_vector(ctx, path + [kind, "center"], body["center"], 2),
                          _coerce(ctx, path + [kind, "radius"], body["radius"], float))
        a, b = keys[kind]
        args = (_vector(ctx, path + [kind, a], body[a], 2), _vector(ctx, path + [kind, b], body[b], 2))
        return Segment(*args) if kind == "segment" else Rectangle(*args)
    except ValueError as exc:
        raise ValidationError(f"world[{i}] geometry", str(exc)) from None


def _agent(ctx, i, item):
    path = ["agents", i]
    if not isinstance(item, dict):
        ctx.fail(path, "expected a mapping")
    allowed = {"id", "role", "controller", "pose", "waypoints"}
    for key in item:
        if key not in allowed:
            ctx.fail(path + [key], f"unknown key {key!r} in agent")
    for key in ("id", "role", "pose"):
        if key not in item:
            ctx.fail(path, f"agent is missing {key!r}")
    agent_id = item["id"]
    if not isinstance(agent_id, (int, str)) or isinstance(agent_id, bool):
        ctx.fail(path + ["id"], "agent id must be an integer or string")
    role = item["role"]
    if role not in ("leader", "follower"):
        ctx.fail(path + ["role"], f"role must be leader or follower, got {role!r}")
    controller = item.get("controller", "reactive" if role == "leader" else "nmpc")
    if controller not in ("nmpc", "vfh", "reactive"):
        ctx.fail(path + ["controller"], f"unknown controller {controller!r}")
    wps = item.get("waypoints")
    if wps is not None:
        if not isinstance(wps, list):
            ctx.fail(path + ["waypoints"], "expected a list of points")
        wps = tuple(_vector(ctx, path + ["waypoints", j], w, 2) for j, w in enumerate(wps))
    return AgentSpec(agent_id, role, controller, _vector(ctx, path + ["pose"], item["pose"], 3), wps)


def validate(sc: Scenario) -> Scenario:
    if not sc.agents:
        raise ValidationError("at least one agent")
    ids = [a.id for a in sc.agents]
    if len(set(ids)) != len(ids):
        raise ValidationError("agent ids are unique", f"duplicates in {ids}")
    if not sc.leaders:
        raise ValidationError("at least one leader")
    for a in sc.agents:
        if a.role == "leader" and a.controller != "reactive":
            raise ValidationError("leaders use the reactive controller", f"agent {a.id!r}")
        if a.role == "follower" and a.controller == "reactive":
            raise ValidationError("followers use nmpc or vfh", f"agent {a.id!r}")
        if a.role == "follower" and a.waypoints:
            raise ValidationError("only leaders carry waypoints", f"agent {a.id!r}")
        if a.waypoints is not None and len(a.waypoints) < 2:
            raise ValidationError("a waypoint path has at least two points", f"agent {a.id!r}")
    if not (sc.dt > 0 and math.isfinite(sc.dt)):
        raise ValidationError("dt > 0")
    if sc.ticks < 0:
        raise ValidationError("ticks >= 0")
    if sc.leader.heading_wrap not in ("unsigned", "signed"):
        raise ValidationError("leader.heading_wrap is unsigned or signed")
    if not sc.leader.spacing > 0:
        raise ValidationError("leader.spacing > 0")
    if sc.vfh.sector_count < 4:
        raise ValidationError("vfh.sector_count >= 4")
    if not 0 <= sc.async_.latency_min_ms <= sc.async_.latency_max_ms:
        raise ValidationError("0 <= async.latency_min_ms <= async.latency_max_ms")
    return sc


def from_dict(data: Any, root=None) -> Scenario:
    ctx = _Ctx(root)
    if not isinstance(data, dict):
        ctx.fail([], "scenario must be a mapping")
    for key in data:
        if key not in _TOP:
            ctx.fail([key], f"unknown top-level key {key!r}")
    kwargs: dict = {}
    for key, typ in _SCALARS.items():
        if key in data:
            kwargs[key] = _coerce(ctx, [key], data[key], typ)
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs["async_" if key == "async" else key] = _section(ctx, key, cls, data[key])
    world = data.get("world") or []
    if not isinstance(world, list):
        ctx.fail(["world"], "expected a list")
    kwargs["world"] = tuple(_obstacle(ctx, i, item) for i, item in enumerate(world))
    agents = data.get("agents")
    if not isinstance(agents, list):
        ctx.fail(["agents"], "expected a list of agents")
    kwargs["agents"] = tuple(_agent(ctx, i, item) for i, item in enumerate(agents))
    return validate(Scenario(**kwargs))


def loads(text: str) -> Scenario:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", exc)), None if mark is None else mark.line + 1) from None
    return from_dict(data, root)


def load_scenario(path) -> Scenario:
    return loads(Path(path).read_text())


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(sc: Scenario) -> dict:
    out: dict = {"name": sc.name, "dt": sc.dt, "ticks": sc.ticks, "seed": sc.seed,
                 "lockstep_budget": sc.lockstep_budget}
    for key in _SECTIONS:
        obj = getattr(sc, "async_" if key == "async" else key)
        out[key] = {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    world = []
    for ob in sc.world:
        if isinstance(ob, Circle):
            world.append({"circle": {"center": list(ob.center), "radius": ob.radius}})
        elif isinstance(ob, Segment):
            world.append({"segment": {"a": list(ob.a), "b": list(ob.b)}})
        else:
            world.append({"rectangle": {"min": list(ob.min), "max": list(ob.max)}})
    out["world"] = world
    agents = []
    for a in sc.agents:
        item = {"id": a.id, "role": a.role, "controller": a.controller, "pose": list(a.pose)}
        if a.waypoints is not None:
            item["waypoints"] = [list(w) for w in a.waypoints]
        agents.append(item)
    out["agents"] = agents
    return out


def dumps(sc: Scenario) -> str:
    return yaml.safe_dump(to_dict(sc), sort_keys=False, default_flow_style=None)


def dump_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dumps(sc))


def shipped(name: str) -> Path:
    """Path of a scenario bundled with the package."""
    path = Path(__file__).with_name("scenarios") / f"{name}.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no shipped scenario named {name!r}")
    return path


def load_shipped(name: str) -> Scenario:
    return load_scenario(shipped(name))

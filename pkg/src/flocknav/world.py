"""Static planar world of circles and segments, and an exact ray-cast 2D LiDAR."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .pointcloud import Pose, Scan2D


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")


@dataclass(frozen=True)
class Segment:
    a: tuple
    b: tuple

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(c) for c in self.a))
        object.__setattr__(self, "b", tuple(float(c) for c in self.b))
        if self.a == self.b:
            raise ValueError("segment endpoints must differ")


@dataclass(frozen=True)
class Rectangle:
    min: tuple
    max: tuple

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(float(c) for c in self.min))
        object.__setattr__(self, "max", tuple(float(c) for c in self.max))
        if not (self.min[0] < self.max[0] and self.min[1] < self.max[1]):
            raise ValueError("rectangle needs min < max on both axes")

    def segments(self) -> list[Segment]:
        (x0, y0), (x1, y1) = self.min, self.max
        return [Segment((x0, y0), (x1, y0)), Segment((x1, y0), (x1, y1)),
                Segment((x1, y1), (x0, y1)), Segment((x0, y1), (x0, y0))]


Obstacle = Union[Circle, Segment, Rectangle]


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 720
    range_max: float = 5.0
    angle_min: float = 0.0

    def __post_init__(self):
        if self.beams < 1 or not self.range_max > 0:
            raise ValueError("need beams >= 1 and range_max > 0")

    @property
    def angle_increment(self) -> float:
        return 2.0 * math.pi / self.beams


class _Geometry:
    """Obstacles flattened into arrays of circles and segments."""

    def __init__(self, world: Iterable[Obstacle]):
        circles, segs = [], []
        for ob in world:
            if isinstance(ob, Circle):
                circles.append((*ob.center, ob.radius))
            elif isinstance(ob, Segment):
                segs.append((*ob.a, *ob.b))
            elif isinstance(ob, Rectangle):
                segs.extend((*s.a, *s.b) for s in ob.segments())
            else:
                raise TypeError(f"unsupported obstacle {ob!r}")
        self.circles = np.array(circles, dtype=float).reshape(-1, 3)
        self.segments = np.array(segs, dtype=float).reshape(-1, 4)


def _ray_hits(origin: np.ndarray, dirs: np.ndarray, geo: _Geometry) -> np.ndarray:
    """Nearest non-negative hit distance per ray direction (inf when none)."""
    best = np.full(dirs.shape[0], np.inf)
    if geo.circles.shape[0]:
        oc = origin - geo.circles[:, :2]                       # (C, 2)
        b = dirs @ oc.T                                        # (B, C)
        c = np.einsum("cd,cd->c", oc, oc) - geo.circles[:, 2] ** 2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        # from inside a circle the near root is negative; the far one is the boundary
        t = np.where(t1 >= 0, t1, t2)
        t = np.where(ok & (t >= 0), t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    if geo.segments.shape[0]:
        a = geo.segments[:, :2]
        e = geo.segments[:, 2:] - a                            # (S, 2)
        w = a - origin                                         # (S, 2)
        denom = dirs[:, :1] * e[None, :, 1] - dirs[:, 1:] * e[None, :, 0]  # (B, S)
        t_num = w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]
        s_num = w[None, :, 0] * dirs[:, 1:] - w[None, :, 1] * dirs[:, :1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = t_num / denom
            s = s_num / denom
        ok = (denom != 0) & (t >= 0) & (s >= 0) & (s <= 1)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))
    return best


def raycast(pose: Pose, world: Sequence[Obstacle], spec: SensorSpec = SensorSpec()) -> Scan2D:
    """Full counterclockwise sweep starting at the robot heading."""
    geo = world if isinstance(world, _Geometry) else _Geometry(world)
    ang = pose.yaw + spec.angle_min + np.arange(spec.beams) * spec.angle_increment
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    r = _ray_hits(np.asarray(pose.position, dtype=float)[:2], dirs, geo)
    sentinel = spec.range_max + 1.0
    ranges = np.where(r <= spec.range_max, r, sentinel)
    return Scan2D(spec.angle_min, spec.angle_increment, spec.range_max, ranges)


def _clearances(points: np.ndarray, geo: _Geometry) -> np.ndarray:
    best = np.full(points.shape[0], np.inf)
    if geo.circles.shape[0]:
        d = np.linalg.norm(points[:, None, :] - geo.circles[None, :, :2], axis=2)
        best = np.minimum(best, np.abs(d - geo.circles[None, :, 2]).min(axis=1))
    if geo.segments.shape[0]:
        a = geo.segments[:, :2]
        e = geo.segments[:, 2:] - a
        rel = points[:, None, :] - a[None, :, :]
        s = np.clip(np.einsum("psd,sd->ps", rel, e) / np.einsum("sd,sd->s", e, e), 0.0, 1.0)
        d = np.linalg.norm(rel - s[..., None] * e[None, :, :], axis=2)
        best = np.minimum(best, d.min(axis=1))
    return best


def min_clearance(point, world: Sequence[Obstacle]) -> float:
    """Distance from ``point`` to the nearest obstacle boundary (``inf`` for an empty world)."""
    geo = world if isinstance(world, _Geometry) else _Geometry(world)
    return float(_clearances(np.asarray(point, dtype=float).reshape(1, 2), geo)[0])


def compile_world(world: Sequence[Obstacle]) -> _Geometry:
    """Pre-flatten a world for repeated ray casts."""
    return _Geometry(world)


def with_agents(world: Sequence[Obstacle], positions, radius: float) -> list:
    """The world plus one circle per agent position."""
    return list(world) + [Circle(tuple(p), radius) for p in np.asarray(positions, dtype=float).reshape(-1, 2)]

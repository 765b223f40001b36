"""Vector-field-histogram follower used as the comparison baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import flocking
from .dynamics import AgentState, ControlInput, InputSet, project_input
from .flocking import NeighborSnapshot
from .leader import LeaderGains, reactive_control
from .pointcloud import Scan2D

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PolarHistogram:
    """Sector ``s`` spans body-frame bearings ``[s*w, (s+1)*w)`` measured from the heading."""

    sectors: np.ndarray
    sector_width: float
    threshold: float = 1.0

    def centers(self) -> np.ndarray:
        return (np.arange(self.sectors.shape[0]) + 0.5) * self.sector_width

    def free(self) -> np.ndarray:
        return self.sectors < self.threshold


@dataclass(frozen=True)
class VfhGains:
    sector_count: int = 36
    threshold: float = 1.0
    lookahead: float = 1.0
    tracking: LeaderGains = LeaderGains()
    heading_wrap: str = "unsigned"


def build_histogram(scan: Scan2D, sector_count: int = 36, threshold: float = 1.0) -> PolarHistogram:
    if sector_count < 4:
        raise ValueError("sector_count must be >= 4")
    width = TWO_PI / sector_count
    ang = (scan.angle_min + np.arange(scan.beams) * scan.angle_increment) % TWO_PI
    sector = np.minimum((ang / width).astype(int), sector_count - 1)
    density = np.where(scan.hits, np.maximum(0.0, scan.range_max - scan.ranges), 0.0)
    return PolarHistogram(np.bincount(sector, weights=density, minlength=sector_count), width, threshold)


def _angular_distance(a: np.ndarray, b: float) -> np.ndarray:
    d = np.abs((a - b) % TWO_PI)
    return np.minimum(d, TWO_PI - d)


def select_direction(hist: PolarHistogram, target_bearing: float) -> float:
    """Center of the free sector nearest ``target_bearing``; ties go counterclockwise.

    Bearings are body-frame.  With no free sector the emptiest one is chosen.
    """
    centers = hist.centers()
    free = hist.free()
    if not free.any():
        return float(centers[int(np.argmin(hist.sectors))])
    dist = _angular_distance(centers, target_bearing)
    # counterclockwise offset from the target decides ties
    ccw = (centers - target_bearing) % TWO_PI
    cand = np.flatnonzero(free)
    order = np.lexsort((ccw[cand] > math.pi, np.round(dist[cand], 12)))
    return float(centers[cand[order[0]]])


def vfh_follower_step(scan: Scan2D, state: AgentState, snapshots: Sequence[NeighborSnapshot],
                      gains: VfhGains = VfhGains(), input_set: InputSet = InputSet()) -> ControlInput:
    """Steer toward the hierarchy-weighted neighbor position through the nearest free sector."""
    if not snapshots:
        return project_input(ControlInput(0.0, 0.0), input_set)
    w = flocking.position_weights({s.id: s.hierarchy for s in snapshots})
    target = sum(w[s.id] * s.position for s in snapshots)
    d = target - np.array([state.px, state.py])
    if float(d @ d) == 0.0:
        return project_input(ControlInput(0.0, 0.0), input_set)
    bearing = (math.atan2(d[1], d[0]) - state.psi) % TWO_PI
    hist = build_histogram(scan, gains.sector_count, gains.threshold)
    chosen = select_direction(hist, bearing) + state.psi
    reach = min(gains.lookahead, float(np.hypot(*d)))
    virtual = np.array([state.px, state.py]) + reach * np.array([math.cos(chosen), math.sin(chosen)])
    return reactive_control(virtual, state, gains.tracking, input_set, gains.heading_wrap)

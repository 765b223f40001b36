"""Modified flocking rules: hierarchy levels, neighbor weights, cohesion/alignment trade-off."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np


class MissingPrediction(LookupError):
    """A neighbor snapshot does not cover the requested prediction step."""


@dataclass(frozen=True)
class FlockParams:
    """Flock and NMPC tuning.

    ``d_sep`` is a *squared* distance (m^2).  ``R_diag``, ``d_sep``, ``r_s``,
    ``r_b`` and ``sep_margin`` have no published values; the defaults here
    are sized for a Husky-class footprint.
    """

    T: int = 10
    T_sep: int = 5
    gamma: float = 0.8
    rho_sep: float = 20.0
    beta: float = 0.5
    q_st: float = 0.5
    c: float = 10.0
    pi_bar: int = 3
    d_sep: float = 1.44
    r_s: float = 0.6
    r_b: float = 0.55
    R_diag: tuple[float, float] = (0.1, 0.1)
    detection_range: float = 5.0
    f_s: int = 4
    # tightening added to d_sep inside the hard constraint only
    sep_margin: float = 0.0

    def __post_init__(self):
        problems = []
        if not 0 < self.T_sep <= self.T:
            problems.append("0 < T_sep <= T")
        if not 0 < self.gamma <= 1:
            problems.append("gamma in (0, 1]")
        if not 0 <= self.beta <= 1:
            problems.append("beta in [0, 1]")
        if not 0 < self.q_st < 1:
            problems.append("q_st in (0, 1)")
        if self.c < 0:
            problems.append("c >= 0")
        if self.pi_bar < 1:
            problems.append("pi_bar >= 1")
        if self.d_sep <= 0:
            problems.append("d_sep > 0")
        if self.r_s <= 0:
            problems.append("r_s > 0")
        if self.f_s < 1:
            problems.append("f_s >= 1")
        if len(self.R_diag) != 2 or min(self.R_diag) < 0:
            problems.append("R_diag is two non-negative weights")
        if self.sep_margin < 0:
            problems.append("sep_margin >= 0")
        if problems:
            raise ValueError("invalid FlockParams: " + "; ".join(problems))


@dataclass(frozen=True)
class NeighborSnapshot:
    """Latest information agent ``i`` holds about neighbor ``id``.

    ``positions[k]`` / ``velocities[k]`` are the neighbor's predicted output
    ``k + 1`` steps after ``stamp``.  ``position`` / ``velocity`` are the
    neighbor's output at ``stamp`` itself.
    """

    id: Hashable
    hierarchy: int
    positions: np.ndarray
    velocities: np.ndarray
    stamp: int
    position: np.ndarray = field(default=None)
    velocity: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        vel = np.asarray(self.velocities, dtype=float).reshape(-1, 2)
        if pos.shape != vel.shape:
            raise ValueError("positions and velocities must have equal length")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        p0 = pos[0] if self.position is None else np.asarray(self.position, dtype=float)
        v0 = vel[0] if self.velocity is None else np.asarray(self.velocity, dtype=float)
        object.__setattr__(self, "position", p0)
        object.__setattr__(self, "velocity", v0)

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]

    def aligned(self, T: int, shift: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Outputs re-indexed ``shift`` ticks later and padded to ``T`` by holding the last entry."""
        idx = np.minimum(np.arange(T) + shift, self.horizon - 1)
        return self.positions[idx], self.velocities[idx]


@dataclass(frozen=True)
class TradeoffMatrix:
    q: float
    n_p: int = 2

    @property
    def diagonal(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_p, 1.0 - self.q), np.full(self.n_p, self.q)])


def update_hierarchy(role: str, prev_neighbor_levels: Iterable[int], pi_bar: int) -> int:
    if role == "leader":
        return 0
    levels = list(prev_neighbor_levels)
    if not levels:
        return pi_bar
    return min(pi_bar, 1 + min(levels))


def position_weights(levels: Mapping[Hashable, int]) -> dict:
    if not levels:
        raise ValueError("position_weights needs at least one agent")
    raw = {j: 2.0 ** -int(pi) for j, pi in levels.items()}
    total = sum(raw.values())
    return {j: w / total for j, w in raw.items()}


def alignment_weights(v_self, rel_positions: Mapping[Hashable, Sequence[float]], beta: float,
                      normalize: bool = False) -> dict:
    """Front neighbors (non-negative inner product with ``v_self``) weigh 1, others ``beta``.

    With ``normalize=True`` the weights are rescaled to sum to one.
    """
    v = np.asarray(v_self, dtype=float)
    raw = {j: (1.0 if float(v @ np.asarray(r, dtype=float)) >= 0.0 else float(beta))
           for j, r in rel_positions.items()}
    if normalize:
        total = sum(raw.values())
        if total > 0:
            return {j: w / total for j, w in raw.items()}
        n = len(raw)
        return {j: 1.0 / n for j in raw}
    return raw


def tradeoff_q(p_self, p_bar, q_st: float, c: float) -> TradeoffMatrix:
    if not 0 < q_st < 1 or c < 0:
        raise ValueError("need q_st in (0, 1) and c >= 0")
    d = np.asarray(p_self, dtype=float) - np.asarray(p_bar, dtype=float)
    return TradeoffMatrix(q=q_st / (1.0 + c * float(d @ d)), n_p=d.shape[0])


def weighted_average_output(snapshots: Sequence[NeighborSnapshot], w_p: Mapping, w_v: Mapping, k: int):
    """Weighted target output ``(p_bar, v_bar)`` at prediction step ``k``.

    The agent's own prediction is passed as one more snapshot in ``snapshots``.
    """
    p_bar = np.zeros(2)
    v_bar = np.zeros(2)
    for snap in snapshots:
        if not 0 <= k < snap.horizon:
            raise MissingPrediction(f"agent {snap.id!r} has no prediction for step {k}")
        p_bar = p_bar + w_p[snap.id] * snap.positions[k]
        v_bar = v_bar + w_v[snap.id] * snap.velocities[k]
    return p_bar, v_bar

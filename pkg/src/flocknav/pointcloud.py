"""Point-cloud reduction: directional filter, down-sampling and neighbor exclusion.

Every stage works on *index sets* into the raw cloud so that each one can be
checked as a subset of its input.  Index arrays are always returned sorted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DegenerateNormal(ValueError):
    """The weighted-average position coincides with the agent; no travel direction exists."""


@dataclass(frozen=True)
class Scan2D:
    angle_min: float
    angle_increment: float
    range_max: float
    ranges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ranges", np.asarray(self.ranges, dtype=float))

    @property
    def sentinel(self) -> float:
        return self.range_max + 1.0

    @property
    def beams(self) -> int:
        return self.ranges.shape[0]

    @property
    def hits(self) -> np.ndarray:
        return self.ranges <= self.range_max

    @classmethod
    def empty(cls, beams: int = 720, range_max: float = 5.0, angle_min: float = 0.0) -> "Scan2D":
        return cls(angle_min, 2 * math.pi / beams, range_max, np.full(beams, range_max + 1.0))


@dataclass(frozen=True)
class VoxelSpec:
    delta_x: float
    delta_y: float
    delta_z: float

    def __post_init__(self):
        if min(self.delta_x, self.delta_y, self.delta_z) <= 0:
            raise ValueError("voxel sizes must be positive")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([self.delta_x, self.delta_y, self.delta_z])


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not all(math.isfinite(a) for a in self.euler):
            raise ValueError("Euler angles must be finite")

    @classmethod
    def planar(cls, x: float, y: float, psi: float) -> "Pose":
        return cls(np.array([x, y]), (0.0, 0.0, psi))

    @property
    def yaw(self) -> float:
        return self.euler[2]


def rotation_global_to_body(phi: float, theta: float, psi: float) -> np.ndarray:
    """Transpose of the ZYX (yaw-pitch-roll) body-to-global rotation."""
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    body_to_global = np.array([
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
        [-st, ct * sf, ct * cf],
    ])
    return body_to_global.T


def _planar_to_body(vectors: np.ndarray, psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return vectors @ np.array([[c, -s], [s, c]])


def _planar_to_global(vectors: np.ndarray, psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return vectors @ np.array([[c, s], [-s, c]])


def to_body(points_global, pose: Pose) -> np.ndarray:
    pts = np.asarray(points_global, dtype=float)
    rel = pts - pose.position
    if rel.shape[-1] == 2:
        return _planar_to_body(rel.reshape(-1, 2), pose.yaw).reshape(rel.shape)
    return rel @ rotation_global_to_body(*pose.euler).T


def to_global(points_body, pose: Pose) -> np.ndarray:
    pts = np.asarray(points_body, dtype=float)
    if pts.shape[-1] == 2:
        return _planar_to_global(pts.reshape(-1, 2), pose.yaw).reshape(pts.shape) + pose.position
    return pts @ rotation_global_to_body(*pose.euler) + pose.position


def scan_to_body_points(scan: Scan2D) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, points)`` for every beam with a hit; no-hit beams are omitted."""
    idx = np.flatnonzero(scan.hits)
    r = scan.ranges[idx]
    ang = scan.angle_min + idx * scan.angle_increment
    pts = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return idx, pts


def body_normal(p_bar_global, pose: Pose, tol: float = 1e-9) -> np.ndarray:
    d = np.asarray(p_bar_global, dtype=float) - pose.position
    if float(np.linalg.norm(d)) < tol:
        raise DegenerateNormal("weighted average coincides with agent position")
    if d.shape[0] == 2:
        return _planar_to_body(d, pose.yaw)
    return rotation_global_to_body(*pose.euler) @ d


def directional_filter(points: np.ndarray, normal) -> np.ndarray:
    """Positions (into ``points``) lying on or in front of the plane through the origin."""
    pts = np.asarray(points, dtype=float).reshape(-1, np.asarray(normal).shape[0])
    return np.flatnonzero(pts @ np.asarray(normal, dtype=float) >= 0.0)


def downsample_2d(ranges: Sequence[float], f_s: int) -> np.ndarray:
    """Positions of the nearest return in each run of ``f_s`` consecutive entries.

    ``ranges`` is the filtered list in beam order; the result indexes into it.
    Ties go to the lowest position.
    """
    if f_s < 1:
        raise ValueError("f_s must be >= 1")
    r = np.asarray(ranges, dtype=float)
    n = r.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    n_seg = -(-n // f_s)
    padded = np.full(n_seg * f_s, np.inf)
    padded[:n] = r
    # argmin returns the first minimum, which is the lowest index
    local = np.argmin(padded.reshape(n_seg, f_s), axis=1)
    return np.arange(n_seg) * f_s + local


def voxel_keys(points: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / spec.sizes).astype(np.int64)


def voxel_downsample_3d(points, spec: VoxelSpec) -> np.ndarray:
    """Keep, per occupied voxel, the point nearest the sensor origin (lowest index on ties)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    keys = voxel_keys(pts, spec)
    # fixed summation order so exactly equidistant points tie and fall back to index
    dist2 = pts[:, 0] * pts[:, 0] + pts[:, 1] * pts[:, 1] + pts[:, 2] * pts[:, 2]
    order = np.lexsort((np.arange(n), dist2, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(n, dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return np.sort(order[first])


def exclude_neighbors(points, neighbor_positions, r_b: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 2)
    nb = np.asarray(neighbor_positions, dtype=float).reshape(-1, pts.shape[1])
    if nb.shape[0] == 0 or pts.shape[0] == 0:
        return np.arange(pts.shape[0])
    d2 = ((pts[:, None, :] - nb[None, :, :]) ** 2).sum(axis=2)
    return np.flatnonzero(np.all(d2 > r_b * r_b, axis=1))


@dataclass(frozen=True)
class ProcessedCloud:
    """Result of :func:`process` with per-stage counts kept for logging."""

    points: np.ndarray
    beam_indices: np.ndarray
    raw_count: int
    filtered_count: int
    sampled_count: int
    filtered: bool


def process(scan: Scan2D, pose: Pose, p_bar_global, neighbor_positions, f_s: int = 4,
            r_b: float = 0.55) -> ProcessedCloud:
    """Scan → body points → directional filter → down-sample → neighbor exclusion → global frame.

    ``neighbor_positions`` are global-frame positions.  When the travel
    direction is degenerate the directional stage passes everything through.
    """
    idx, pts = scan_to_body_points(scan)
    raw = idx.shape[0]
    filtered = True
    if p_bar_global is None:
        filtered = False
        keep = np.arange(raw)
    else:
        try:
            normal = body_normal(p_bar_global, pose)
            keep = directional_filter(pts, normal)
        except DegenerateNormal:
            filtered = False
            keep = np.arange(raw)
    idx_f, pts_f = idx[keep], pts[keep]
    sel = downsample_2d(scan.ranges[idx_f], f_s)
    idx_s, pts_s = idx_f[sel], pts_f[sel]
    nb = np.asarray(neighbor_positions, dtype=float).reshape(-1, 2)
    if nb.shape[0]:
        keep = exclude_neighbors(pts_s, to_body(nb, pose), r_b)
        idx_o, pts_o = idx_s[keep], pts_s[keep]
    else:
        idx_o, pts_o = idx_s, pts_s
    return ProcessedCloud(
        points=to_global(pts_o, pose) if pts_o.shape[0] else np.zeros((0, 2)),
        beam_indices=idx_o,
        raw_count=raw,
        filtered_count=idx_f.shape[0],
        sampled_count=idx_s.shape[0],
        filtered=filtered,
    )


# ---------------------------------------------------------------------------
# plain-text cloud files
#
#   # frame=body columns=x,y,range angle_min=0 angle_increment=0.0087 range_max=5
#   1.0 0.0 1.0
#   ...


def write_cloud(path, points, *, frame: str = "body", ranges=None, **meta) -> None:
    pts = np.asarray(points, dtype=float)
    cols = ["x", "y", "z"][: pts.shape[1]]
    data = pts
    if ranges is not None:
        cols.append("range")
        data = np.column_stack([pts, np.asarray(ranges, dtype=float)])
    header = {"frame": frame, "columns": ",".join(cols), **meta}
    with open(path, "w") as fh:
        fh.write("# " + " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in header.items()) + "\n")
        for row in data:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cloud(path) -> tuple[np.ndarray, dict]:
    """Return ``(rows, header)``; ``header["columns"]`` names the row fields."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing header line")
    header: dict = {}
    for token in lines[0][1:].split():
        key, _, value = token.partition("=")
        try:
            header[key] = float(value) if key != "columns" and key != "frame" else value
        except ValueError:
            header[key] = value
    cols = header.get("columns", "x,y").split(",")
    header["columns"] = cols
    rows = [list(map(float, ln.split())) for ln in lines[1:] if ln.strip()]
    for n, row in enumerate(rows, start=2):
        if len(row) != len(cols):
            raise ValueError(f"{path}:{n}: expected {len(cols)} columns, got {len(row)}")
    return np.array(rows, dtype=float).reshape(-1, len(cols)), header

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flocknav.pointcloud import (
    DegenerateNormal,
    Pose,
    Scan2D,
    VoxelSpec,
    body_normal,
    directional_filter,
    downsample_2d,
    exclude_neighbors,
    process,
    read_cloud,
    rotation_global_to_body,
    scan_to_body_points,
    to_body,
    to_global,
    voxel_downsample_3d,
    voxel_keys,
    write_cloud,
)
from oracles import oracle_sector_min, oracle_voxel


def scan_with(hits, beams=720, range_max=5.0):
    s = Scan2D.empty(beams, range_max)
    ranges = s.ranges.copy()
    for i, r in hits.items():
        ranges[i] = r
    return Scan2D(s.angle_min, s.angle_increment, range_max, ranges)


def test_scan_to_points_examples():
    idx, pts = scan_to_body_points(scan_with({0: 2.0}))
    assert idx.tolist() == [0]
    assert np.allclose(pts, [[2.0, 0.0]])
    idx, pts = scan_to_body_points(scan_with({180: 1.0}))
    assert np.allclose(pts, [[0.0, 1.0]], atol=1e-15)
    idx, pts = scan_to_body_points(Scan2D.empty())
    assert idx.size == 0 and pts.shape == (0, 2)


def test_body_normal_examples():
    assert np.allclose(body_normal((1, 0), Pose.planar(0, 0, 0)), [1, 0])
    assert np.allclose(body_normal((1, 0), Pose.planar(0, 0, math.pi / 2)), [0, -1], atol=1e-15)
    with pytest.raises(DegenerateNormal):
        body_normal((2.0, 3.0), Pose.planar(2.0, 3.0, 0.4))


def test_planar_rotation_matches_euler_matrix():
    psi = 0.7
    M = rotation_global_to_body(0.0, 0.0, psi)
    v = np.array([0.3, -1.2, 0.0])
    assert np.allclose((M @ v)[:2], to_body([[0.3, -1.2]], Pose.planar(0, 0, psi))[0])


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-7, 7))
def test_body_global_roundtrip(x, y, psi):
    pose = Pose.planar(x, y, psi)
    pts = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert np.allclose(to_global(to_body(pts, pose), pose), pts, atol=1e-9)


def test_directional_filter_examples():
    keep = directional_filter(np.array([[0.5, -2.0], [-0.1, 5.0], [0.0, 3.0]]), [1.0, 0.0])
    assert keep.tolist() == [0, 2]


@given(st.floats(0, 2 * math.pi), st.integers(8, 400))
def test_directional_filter_ring_keeps_half(theta, n):
    ang = 2 * math.pi * np.arange(n) / n
    ring = np.column_stack([np.cos(ang), np.sin(ang)])
    normal = (math.cos(theta), math.sin(theta))
    kept = directional_filter(ring, normal)
    brute = [k for k in range(n) if normal[0] * ring[k, 0] + normal[1] * ring[k, 1] >= 0]
    assert kept.tolist() == brute
    assert abs(len(kept) - n / 2) <= 1


@given(st.floats(-math.pi, math.pi), st.integers(0, 2**31 - 1))
def test_directional_filter_rotation_equivariant(phi, seed):
    rng = np.random.default_rng(seed)
    pts = rng.integers(-20, 20, (40, 2)).astype(float)
    normal = rng.integers(-5, 5, 2).astype(float)
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    a = directional_filter(pts, normal)
    b = directional_filter(pts @ rot.T, rot @ normal)
    # points whose inner product is within rounding of zero may flip either way
    margin = np.abs(pts @ normal) > 1e-9
    assert np.array_equal(np.isin(np.arange(40), a)[margin], np.isin(np.arange(40), b)[margin])


def test_downsample_2d_examples():
    assert downsample_2d([5, 4, 3, 2, 9, 1, 8, 7], 4).tolist() == [3, 5]
    assert downsample_2d([3.0, 1.0, 2.0], 1).tolist() == [0, 1, 2]
    assert len(downsample_2d(np.arange(7.0), 4)) == 2
    assert downsample_2d([], 4).size == 0


def test_downsample_2d_ties_go_low():
    assert downsample_2d([2.0, 1.0, 1.0, 1.0], 4).tolist() == [1]


@given(st.lists(st.integers(0, 6).map(float), max_size=60), st.integers(1, 9))
def test_downsample_2d_matches_oracle(ranges, f_s):
    assert downsample_2d(ranges, f_s).tolist() == oracle_sector_min(ranges, f_s)


def test_voxel_examples():
    assert voxel_keys(np.array([[0.25, 0.75, 1.2]]), VoxelSpec(0.5, 0.5, 0.5)).tolist() == [[0, 1, 2]]
    pts = np.array([[0.25, 0.25, 0.25], [0.4, 0.4, 0.4], [0.6, 0.1, 0.1]])
    spec = VoxelSpec(0.5, 0.5, 0.5)
    assert voxel_downsample_3d(pts, spec).tolist() == [0, 2]
    assert oracle_voxel(pts, spec.sizes) == [0, 2]
    grid = np.array([[0.1, 0.1, 0.1], [1.1, 0.1, 0.1], [0.1, 1.1, 0.1]])
    assert voxel_downsample_3d(grid, spec).tolist() == [0, 1, 2]


def test_voxel_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        VoxelSpec(0.5, 0.0, 0.5)


@given(st.integers(0, 2**31 - 1))
def test_voxel_matches_oracle_with_ties(seed):
    rng = np.random.default_rng(seed)
    # coarse lattice so equal distances and shared voxels are common
    pts = rng.integers(-6, 7, (rng.integers(0, 120), 3)) * 0.25
    spec = VoxelSpec(0.5, 0.75, 1.0)
    assert voxel_downsample_3d(pts, spec).tolist() == oracle_voxel(pts, spec.sizes)


def test_exclude_neighbors_examples():
    pts = np.array([[0.3, 0.0], [0.6, 0.0]])
    assert exclude_neighbors(pts, [[0.0, 0.0]], 0.55).tolist() == [1]
    assert exclude_neighbors(pts, np.zeros((0, 2)), 0.55).tolist() == [0, 1]


@given(st.integers(0, 2**31 - 1))
def test_exclude_neighbors_zero_radius_identity(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 2))
    nb = rng.normal(size=(3, 2)) + 10.0
    assert exclude_neighbors(pts, nb, 0.0).tolist() == list(range(30))


def test_process_empty_scan():
    out = process(Scan2D.empty(), Pose.planar(0, 0, 0), (1.0, 0.0), [])
    assert out.points.shape == (0, 2)


def test_process_full_ring_reduction_bound():
    ring = Scan2D(0.0, 2 * math.pi / 720, 5.0, np.full(720, 2.0))
    out = process(ring, Pose.planar(1.0, -1.0, 0.3), (3.0, 2.0), [], f_s=4)
    assert out.raw_count == 720
    assert abs(out.filtered_count - 360) <= 1
    assert len(out.points) <= 91


def test_process_isolated_return_behind_plane():
    out = process(scan_with({360: 1.0}), Pose.planar(0, 0, 0), (1.0, 0.0), [])
    assert out.points.shape[0] == 0


def test_process_degenerate_normal_passes_everything():
    s = scan_with({0: 1.0, 360: 1.0})
    out = process(s, Pose.planar(0, 0, 0), (0.0, 0.0), [], f_s=1)
    assert not out.filtered
    assert out.beam_indices.tolist() == [0, 360]


def test_process_drops_neighbor_returns_and_outputs_global_frame():
    pose = Pose.planar(1.0, 2.0, math.pi / 2)
    # beam 0 looks along +y globally; a neighbor sits 1.5 m ahead
    s = scan_with({0: 1.0, 90: 2.0})
    out = process(s, pose, (1.0, 5.0), [[1.0, 3.5]], f_s=1, r_b=0.55)
    assert out.beam_indices.tolist() == [90]
    ang = math.pi / 2 + 90 * s.angle_increment
    assert np.allclose(out.points, [[1.0 + 2 * math.cos(ang), 2.0 + 2 * math.sin(ang)]])


@given(st.integers(0, 2**31 - 1))
def test_process_stages_shrink(seed):
    rng = np.random.default_rng(seed)
    ranges = np.where(rng.random(720) < 0.5, rng.uniform(0.2, 5.0, 720), 6.0)
    s = Scan2D(0.0, 2 * math.pi / 720, 5.0, ranges)
    nb = rng.uniform(-3, 3, (2, 2))
    out = process(s, Pose.planar(0, 0, rng.uniform(-3, 3)), rng.uniform(-3, 3, 2), nb, f_s=4)
    assert out.raw_count >= out.filtered_count >= out.sampled_count >= len(out.points)
    assert out.sampled_count <= out.filtered_count // 4 + 1
    assert set(out.beam_indices.tolist()) <= set(np.flatnonzero(s.hits).tolist())


def test_cloud_file_roundtrip(tmp_path):
    pts = np.array([[1.0, 2.0], [0.1, -0.3]])
    path = tmp_path / "cloud.txt"
    write_cloud(path, pts, ranges=[2.2, 0.3], angle_min=0.0, range_max=5.0)
    rows, header = read_cloud(path)
    assert header["frame"] == "body"
    assert header["columns"] == ["x", "y", "range"]
    assert header["range_max"] == 5.0
    assert np.array_equal(rows[:, :2], pts)


def test_cloud_file_rejects_ragged_rows(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# frame=body columns=x,y\n1 2\n3\n")
    with pytest.raises(ValueError):
        read_cloud(path)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import plane_frame, random_rotation
from defslam import io
from defslam.geometry import (
    back_project,
    depth_normals,
    estimate_normals,
    project,
    project_points,
    smooth_depth,
    vertex_map,
    voxel_downsample,
)
from defslam.types import CameraIntrinsics, DepthFrame, RigidTransform, SurfelCloud, VoxelHash, columns


# -- value types ----------------------------------------------------------------


def test_columns_are_matrix_columns():
    A = np.arange(9.0).reshape(3, 3)
    c1, c2, c3 = columns(A)
    np.testing.assert_array_equal(c1, [0, 3, 6])
    np.testing.assert_array_equal(c3, [2, 5, 8])


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


@given(st.integers(0, 10_000))
def test_rigid_compose_inverse_roundtrip(seed):
    rng = np.random.default_rng(seed)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 10)
    U = RigidTransform(random_rotation(rng), rng.normal(size=3) * 10)
    p = rng.normal(size=(5, 3)) * 20
    np.testing.assert_allclose(T.compose(U).apply(p), T.apply(U.apply(p)), atol=1e-9)
    np.testing.assert_allclose(T.inverse().apply(T.apply(p)), p, atol=1e-9)
    R = T.compose(U).rotation
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9


def test_intrinsics_validation_and_text_roundtrip():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)
    intr = CameraIntrinsics(523.25, 521.5, 319.5, 239.25, 640, 480)
    assert CameraIntrinsics.from_text(intr.to_text()) == intr
    with pytest.raises(ValueError):
        CameraIntrinsics.from_text("1 2 3")


def test_depth_frame_validation(intr100):
    with pytest.raises(ValueError):
        DepthFrame(np.zeros((10, 10)), np.zeros((10, 10, 3)), intr100)
    with pytest.raises(ValueError):
        DepthFrame(-np.ones(intr100.shape), np.zeros(intr100.shape + (3,)), intr100)


# -- projection -------------------------------------------------------------------


def test_project_examples(intr100):
    assert project(intr100, (0, 0, 100)) == (50.0, 50.0)
    assert project(intr100, (10, 0, 100)) == (60.0, 50.0)
    assert project(intr100, (0, 0, -5)) is None
    assert project(intr100, (1000, 0, 100)) is None


def test_back_project_examples(intr100):
    f = plane_frame(100.0, intr100)
    np.testing.assert_allclose(back_project(f, (50, 50)), (0, 0, 100))
    np.testing.assert_allclose(back_project(f, (60, 50)), (10, 0, 100))
    f.depth[50, 60] = 0.0
    assert back_project(f, (60, 50)) is None


@given(st.integers(0, 100), st.integers(0, 100), st.floats(1.0, 500.0))
def test_projection_roundtrips(col, row, d):
    intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    depth = np.zeros(intr.shape)
    depth[row, col] = d
    f = DepthFrame(depth, np.zeros(intr.shape + (3,), np.uint8), intr)
    p = back_project(f, (col, row))
    uv = project(intr, p)
    assert abs(uv[0] - col) < 0.5 and abs(uv[1] - row) < 0.5
    uv_all, pix, ok = project_points(intr, p[None])
    assert ok[0] and tuple(pix[0]) == (col, row)
    q = back_project(f, tuple(pix[0]))
    np.testing.assert_allclose(q, p, atol=1e-6)


# -- normals ----------------------------------------------------------------------


def test_frontal_plane_normals(intr100):
    n = depth_normals(plane_frame(100.0, intr100))
    inner = n[1:-1, 1:-1].reshape(-1, 3)
    np.testing.assert_allclose(inner, np.tile([0, 0, -1.0], (len(inner), 1)), atol=1e-12)
    assert np.all(np.isnan(n[0])) and np.all(np.isnan(n[:, -1]))


def test_tilted_plane_normals(intr100):
    n = depth_normals(plane_frame(100.0, intr100, tilt_deg=45.0))
    inner = n[1:-1, 1:-1].reshape(-1, 3)
    # plane normal (0, -sin, cos) turned toward the camera
    expect = np.array([0.0, np.sqrt(0.5), -np.sqrt(0.5)])
    ang = np.degrees(np.arccos(np.clip(inner @ expect, -1, 1)))
    assert ang.max() < 0.5


def test_normals_empty_next_to_invalid(intr100):
    f = plane_frame(100.0, intr100)
    f.depth[20, 20] = 0.0
    n = depth_normals(f)
    for r, c in [(20, 21), (21, 20), (19, 20), (20, 19), (20, 20)]:
        assert np.all(np.isnan(n[r, c]))
    assert np.all(np.isfinite(n[22, 22]))


def test_estimate_normals_plane_faces_camera():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-10, 10, 500), rng.uniform(-10, 10, 500), np.full(500, 50.0)])
    n = estimate_normals(pts, k=8)
    np.testing.assert_allclose(n, np.tile([0, 0, -1.0], (500, 1)), atol=1e-9)


def test_smooth_depth_keeps_invalid_and_planes(intr100):
    f = plane_frame(100.0, intr100)
    f.depth[40:45, 40:45] = 0.0
    out = smooth_depth(f.depth, 1.5, 1.0)
    assert np.all(out[40:45, 40:45] == 0)
    assert np.abs(out[f.depth > 0] - 100.0).max() < 1e-3


# -- voxel downsampling ---------------------------------------------------------------


def test_voxel_downsample_examples():
    out = voxel_downsample(np.array([[0.01, 0.01, 0.01], [0.06, 0.01, 0.01]]), 0.2)
    np.testing.assert_allclose(out, [[0.035, 0.01, 0.01]])
    g = np.stack(np.meshgrid(*[np.arange(5) * 4.0 + 2.0] * 3, indexing="ij"), -1).reshape(-1, 3)
    np.testing.assert_allclose(voxel_downsample(g, 4.0), g[np.lexsort((g[:, 2], g[:, 1], g[:, 0]))])
    assert voxel_downsample(np.zeros((0, 3)), 1.0).shape == (0, 3)
    with pytest.raises(ValueError):
        voxel_downsample(g, 0.0)


def test_voxel_downsample_random_cube_against_bucketing():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 40, (10_000, 3))
    out = voxel_downsample(pts, 4.0)
    assert len(out) <= 1000
    # oracle: dictionary bucketing
    buckets = {}
    for p in pts:
        buckets.setdefault(tuple(np.floor(p / 4.0).astype(int)), []).append(p)
    assert len(buckets) == len(out)
    oracle = np.array([np.mean(buckets[k], axis=0) for k in sorted(buckets)])
    np.testing.assert_allclose(out, oracle, atol=1e-9)
    from scipy.spatial import cKDTree

    d, _ = cKDTree(out).query(pts)
    assert d.max() <= 4.0 * np.sqrt(3)


@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_voxel_downsample_idempotent(seed, cell):
    pts = np.random.default_rng(seed).uniform(-20, 20, (300, 3))
    once = voxel_downsample(pts, cell)
    np.testing.assert_allclose(voxel_downsample(once, cell), once, atol=1e-12)


def test_voxel_downsample_attrs_follow_points():
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [5.1, 0, 0]])
    c, a = voxel_downsample(pts, 1.0, np.array([1.0, 3.0, 7.0]))
    np.testing.assert_allclose(a, [2.0, 7.0])


# -- spatial index ------------------------------------------------------------------


@given(st.integers(0, 10_000), st.floats(0.5, 8.0), st.floats(0.5, 6.0))
def test_radius_query_matches_brute_force(seed, radius, cell):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-15, 15, (400, 3))
    h = VoxelHash(pts, cell)
    for q in rng.uniform(-15, 15, (5, 3)):
        brute = np.flatnonzero(np.sum((pts - q) ** 2, axis=1) <= radius * radius)
        np.testing.assert_array_equal(h.radius_query(q, radius), brute)


def test_surfel_cloud_index_tracks_mutation():
    rng = np.random.default_rng(2)
    c = SurfelCloud(rng.uniform(0, 10, (50, 3)))
    q = np.array([5.0, 5.0, 5.0])
    before = c.radius_query(q, 3.0)
    c.positions = c.positions + 100.0
    assert len(c.radius_query(q, 3.0)) == 0
    c.extend(SurfelCloud(q[None]))
    assert list(c.radius_query(q, 0.1)) == [50]
    assert len(before) > 0


def test_surfel_cloud_copy_subset_and_empty_provenance():
    c = SurfelCloud()
    assert len(c) == 0 and c.provenance.shape == (0, 3)
    c = SurfelCloud(np.ones((3, 3)), weights=[1, 2, 3])
    d = c.copy()
    d.weights[0] = 9
    assert c.weights[0] == 1
    assert len(c.subset([0, 2])) == 2
    with pytest.raises(ValueError):
        SurfelCloud(np.ones((3, 3)), weights=[1, 2])


# -- file formats ---------------------------------------------------------------------


def test_depth_pgm_roundtrip(tmp_path):
    d = np.array([[0.0, 12.34], [655.35, 55.555]])
    io.write_depth_pgm(tmp_path / "d.pgm", d)
    back = io.read_depth_pgm(tmp_path / "d.pgm")
    np.testing.assert_allclose(back, [[0, 12.34], [655.35, 55.56]], atol=1e-9)
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5") and raw.endswith(bytes([0, 0, 4, 210, 255, 255, 21, 180]))


def test_depth_raw_and_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 100, (7, 5)).astype(np.float32).astype(np.float64)
    io.write_depth_raw(tmp_path / "d.raw", d)
    np.testing.assert_array_equal(io.read_depth_raw(tmp_path / "d.raw"), d)
    rgb = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    io.write_ppm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "c.ppm"), rgb)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, binary):
    rng = np.random.default_rng(3)
    c = SurfelCloud(
        rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), rng.integers(0, 256, (20, 3)), rng.uniform(1, 10, 20)
    )
    faces = rng.integers(0, 20, (6, 3))
    io.write_ply(tmp_path / "m.ply", c, binary=binary, faces=faces)
    back, f = io.read_ply(tmp_path / "m.ply", with_faces=True)
    np.testing.assert_array_equal(back.positions, c.positions)
    np.testing.assert_array_equal(back.normals, c.normals)
    np.testing.assert_array_equal(back.colors, c.colors)
    np.testing.assert_array_equal(back.weights, c.weights)
    np.testing.assert_array_equal(f, faces)


def test_frame_directory_roundtrip(tmp_path, intr100):
    f = plane_frame(55.0, intr100, index=3)
    io.write_frame(tmp_path, f)
    io.write_intrinsics(tmp_path / "intrinsics.txt", intr100)
    assert io.list_frames(tmp_path) == [3]
    g = io.read_frame(tmp_path, 3, io.read_intrinsics(tmp_path / "intrinsics.txt"))
    assert np.abs(g.depth - f.depth).max() <= 0.005 + 1e-9
    np.testing.assert_array_equal(g.rgb, f.rgb)


def test_vertex_map_zero_where_invalid(intr100):
    f = plane_frame(100.0, intr100)
    f.depth[3, 4] = 0
    V = vertex_map(f)
    assert np.all(V[3, 4] == 0) and V[50, 50, 2] == 100.0

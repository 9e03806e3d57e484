from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affkp.errors import DataError, EmptyCloudError
from affkp.geometry import (CameraIntrinsics, PointCloudFrame, RgbdImage, backproject, estimate_normals,
                            normal_quality, project, quantize, read_depth, read_ply, subsample,
                            subsample_indices, write_depth, write_ply)

K = CameraIntrinsics(200.0, 210.0, 79.5, 59.5, 160, 120)


def _single_pixel(u, v, z, k=K):
    depth = np.zeros((k.height, k.width))
    depth[v, u] = z
    return backproject(RgbdImage(depth, None), k)


def test_principal_point_ray():
    k = CameraIntrinsics(100.0, 100.0, 20.0, 10.0, 40, 30)
    cloud = _single_pixel(20, 10, 0.8, k)
    np.testing.assert_allclose(cloud.xyz, [[0.0, 0.0, 0.8]])


def test_unit_tangent_pixel():
    k = CameraIntrinsics(10.0, 10.0, 5.0, 5.0, 20, 10)
    cloud = _single_pixel(15, 5, 1.0, k)
    np.testing.assert_allclose(cloud.xyz, [[1.0, 0.0, 1.0]])


def test_two_by_two_image():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
    cloud = backproject(RgbdImage(np.array([[1.0, 1.0], [0.0, 2.0]]), None), k)
    assert len(cloud) == 3
    np.testing.assert_allclose(cloud.xyz[-1], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(cloud.pixel_index, [0, 1, 3])


def test_all_invalid_depth_is_empty_cloud_error():
    with pytest.raises(EmptyCloudError):
        backproject(RgbdImage(np.zeros((K.height, K.width)), None), K)


def test_size_mismatch_rejected():
    with pytest.raises(DataError):
        backproject(RgbdImage(np.ones((5, 5)), None), K)


@pytest.mark.parametrize("bad", [dict(fx=0.0), dict(fy=-1.0), dict(cx=160.0), dict(cy=-0.5)])
def test_intrinsics_invariants(bad):
    d = K.to_dict() | bad
    with pytest.raises(DataError):
        CameraIntrinsics.from_dict(d)


def test_intrinsics_require_exact_fields():
    with pytest.raises(DataError):
        CameraIntrinsics.from_dict(K.to_dict() | {"skew": 0.0})


@settings(max_examples=50, deadline=None)
@given(st.integers(0, K.width - 1), st.integers(0, K.height - 1), st.floats(0.1, 5.0))
def test_projection_round_trip(u, v, z):
    cloud = _single_pixel(u, v, z)
    uv = project(cloud.xyz, K)[0]
    assert abs(uv[0] - u) < 1e-9 and abs(uv[1] - v) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_point_count_equals_positive_depth(seed):
    rng = np.random.default_rng(seed)
    depth = np.where(rng.uniform(size=(12, 16)) < 0.6, rng.uniform(0.2, 2.0, size=(12, 16)), 0.0)
    if not depth.any():
        depth[0, 0] = 1.0
    cloud = backproject(RgbdImage(depth, None), CameraIntrinsics(10.0, 10.0, 8.0, 6.0, 16, 12))
    assert len(cloud) == int((depth > 0).sum())


def test_plane_normals_face_camera():
    g = np.linspace(-0.1, 0.1, 15)
    xx, yy = np.meshgrid(g, g)
    xyz = np.column_stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    cloud = estimate_normals(PointCloudFrame(xyz, np.zeros_like(xyz), np.zeros_like(xyz), np.arange(len(xyz))))
    np.testing.assert_allclose(cloud.normal, np.tile([0.0, 0.0, -1.0], (len(xyz), 1)), atol=1e-9)
    assert not cloud.flagged.any()


def test_sphere_normals_within_five_degrees():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(20000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d[d[:, 2] < -0.6]  # cap visible from the origin
    centre = np.array([0.0, 0.0, 2.0])
    xyz = centre + d
    cloud = estimate_normals(PointCloudFrame(xyz, np.zeros_like(xyz), np.zeros_like(xyz), np.arange(len(xyz))))
    cos = np.einsum("ij,ij->i", cloud.normal, d)
    assert np.all(cos > np.cos(np.radians(5)))


def test_collinear_neighbourhood_flagged():
    xyz = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.ones(5)])
    cloud = estimate_normals(PointCloudFrame(xyz, np.zeros_like(xyz), np.zeros_like(xyz), np.arange(5)), 3)
    assert cloud.flagged.all()
    np.testing.assert_array_equal(cloud.normal, np.tile([0.0, 0.0, -1.0], (5, 1)))
    assert normal_quality(cloud)["flagged_normals"] == 5


def test_identical_points_flagged():
    xyz = np.tile([0.1, 0.2, 1.0], (6, 1))
    cloud = estimate_normals(PointCloudFrame(xyz, np.zeros_like(xyz), np.zeros_like(xyz), np.arange(6)), 4)
    assert cloud.flagged.all()


def test_normals_need_enough_points():
    xyz = np.random.default_rng(0).normal(size=(4, 3))
    with pytest.raises(DataError):
        estimate_normals(PointCloudFrame(xyz, np.zeros_like(xyz), np.zeros_like(xyz), np.arange(4)), 10)


def test_normals_unit_and_oriented(scene0):
    n = scene0.cloud.normal
    assert np.all(np.abs(np.linalg.norm(n, axis=1) - 1) < 1e-6)
    ok = ~scene0.cloud.flagged
    assert np.all(np.einsum("ij,ij->i", n[ok], -scene0.cloud.xyz[ok]) >= -1e-6)


def test_subsample_identity_and_determinism():
    np.testing.assert_array_equal(subsample_indices(100, 100, 3), np.arange(100))
    a = subsample_indices(1000, 256, 5)
    np.testing.assert_array_equal(a, subsample_indices(1000, 256, 5))
    assert len(np.unique(a)) == 256
    assert not np.array_equal(a, subsample_indices(1000, 256, 6))


def test_subsample_cloud(scene0):
    sub = subsample(scene0.cloud, 500, 0)
    assert len(sub) == 500
    with pytest.raises(DataError):
        subsample_indices(10, 0, 0)


def test_ply_round_trip(tmp_path, scene0):
    path = tmp_path / "c.ply"
    write_ply(path, scene0.cloud)
    back = read_ply(path)
    q = quantize(scene0.cloud)
    np.testing.assert_array_equal(back.xyz, q.xyz)
    np.testing.assert_array_equal(back.rgb, q.rgb)
    np.testing.assert_array_equal(back.normal, q.normal)
    assert path.read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")


def test_ply_rejects_garbage(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"not a ply")
    with pytest.raises(DataError):
        read_ply(p)


def test_depth_file_round_trip(tmp_path):
    depth = np.random.default_rng(0).uniform(0, 2, size=(K.height, K.width)).astype(np.float32)
    write_depth(tmp_path / "d.bin", depth, K)
    back, k = read_depth(tmp_path / "d.bin")
    assert k == K
    np.testing.assert_array_equal(back, depth)
    (tmp_path / "d.bin").write_bytes(b"\0" * 12)
    with pytest.raises(DataError):
        read_depth(tmp_path / "d.bin")


def test_cloud_validate():
    xyz = np.array([[0.0, 0.0, 1.0]])
    with pytest.raises(DataError):
        PointCloudFrame(xyz, [[0, 0, 0]], [[0.0, 0.0, 2.0]], [0]).validate()
    with pytest.raises(DataError):
        PointCloudFrame(xyz * np.nan, [[0, 0, 0]], [[0.0, 0.0, 1.0]], [0]).validate()

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markercap.geometry import (
    CameraModel,
    GeometryError,
    RigidTransform,
    coplanarity_score,
    kabsch_align,
    matrix_to_rot6d,
    project_point,
    project_points,
    rot6d_to_matrix,
    rotation_about_axis,
    rotation_log,
    triangulate,
    triangulate_ransac,
    triangulate_with_residuals,
)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_projection_matches_hand_computation():
    cam = CameraModel("a", 640, 480, 500.0, 400.0, 320.0, 240.0)
    uv = project_point(cam, np.array([0.1, -0.2, 2.0]))
    assert np.allclose(uv, [320 + 500 * 0.05, 240 - 400 * 0.1])


def test_point_behind_camera_raises():
    cam = CameraModel("a", 640, 480, 500.0, 500.0, 320.0, 240.0)
    with pytest.raises(GeometryError, match="behind"):
        project_point(cam, np.array([0.0, 0.0, -1.0]))
    uv, depth = project_points(cam, np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]))
    assert np.isnan(uv[0]).all() and np.allclose(uv[1], [320, 240]) and depth[0] < 0


def test_invalid_rotation_rejected():
    with pytest.raises(GeometryError):
        CameraModel("a", 10, 10, 1.0, 1.0, 5, 5, rotation=np.diag([1.0, 1.0, -1.0]))


def test_camera_dict_roundtrip(ring_cameras):
    cam = ring_cameras[2]
    back = CameraModel.from_dict(cam.to_dict())
    assert np.allclose(back.P, cam.P) and back.id == cam.id


def test_triangulation_exact_without_noise(ring_cameras):
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = rng.uniform(-0.2, 0.2, 3)
        obs = [(c, project_point(c, X)) for c in ring_cameras]
        assert np.allclose(triangulate(obs), X, atol=1e-9)


def test_triangulation_needs_three_views(ring_cameras):
    X = np.zeros(3)
    obs = [(c, project_point(c, X)) for c in ring_cameras[:2]]
    with pytest.raises(GeometryError, match="insufficient"):
        triangulate(obs)


def test_triangulation_residuals_reported(ring_cameras):
    X = np.array([0.05, 0.0, 0.1])
    obs = [(c, project_point(c, X) + np.array([1.0, 0.0])) for c in ring_cameras]
    tri = triangulate_with_residuals(obs)
    assert tri.residuals.shape == (6,)
    assert 0.3 < tri.mean_reprojection < 1.5


def test_ransac_rejects_outlier_views(ring_cameras):
    rng = np.random.default_rng(3)
    X = np.array([0.02, -0.03, 0.05])
    obs = [(c, project_point(c, X) + rng.normal(0, 0.3, 2)) for c in ring_cameras]
    obs[1] = (obs[1][0], obs[1][1] + 60.0)
    obs[4] = (obs[4][0], obs[4][1] - 45.0)
    tri = triangulate_ransac(obs, inlier_threshold=2.0)
    assert list(tri.inliers) == [0, 2, 3, 5]
    assert np.linalg.norm(tri.point - X) < 1e-3


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(0)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    src = rng.normal(size=(10, 3))
    T = kabsch_align(src, src @ R.T + t)
    assert np.allclose(T.rotation, R, atol=1e-10) and np.allclose(T.translation, t, atol=1e-10)
    assert np.linalg.det(T.rotation) > 0


def test_kabsch_degenerate():
    with pytest.raises(GeometryError, match="degenerate"):
        kabsch_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(GeometryError, match="degenerate"):
        kabsch_align(line, line)


def test_kabsch_reflection_is_not_returned():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(8, 3))
    T = kabsch_align(src, src * np.array([1.0, 1.0, -1.0]))
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rot6d_roundtrip(seed):
    R = random_rotation(np.random.default_rng(seed))
    assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


def test_rot6d_degenerate():
    with pytest.raises(GeometryError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.0, 3.0), st.integers(0, 1000))
def test_rotation_log_inverts_axis_angle(angle, seed):
    axis = np.random.default_rng(seed).normal(size=3)
    axis /= np.linalg.norm(axis)
    w = rotation_log(rotation_about_axis(axis, angle))
    assert np.allclose(w, axis * angle, atol=1e-9)


def test_rigid_transform_compose_inverse():
    rng = np.random.default_rng(2)
    A = RigidTransform(random_rotation(rng), rng.normal(size=3))
    B = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(4, 3))
    assert np.allclose(A.compose(B).apply(p), A.apply(B.apply(p)))
    assert np.allclose(A.inverse().apply(A.apply(p)), p)
    assert np.allclose(A.compose(B).as_matrix(), A.as_matrix() @ B.as_matrix())


def test_coplanarity():
    rng = np.random.default_rng(0)
    flat = np.c_[rng.normal(size=(6, 2)), np.zeros(6)]
    assert coplanarity_score(flat) < 1e-12
    bumpy = flat.copy()
    bumpy[:, 2] = [0.1, -0.1, 0.1, -0.1, 0.1, -0.1]
    assert coplanarity_score(bumpy) > 0.01
    with pytest.raises(GeometryError, match="too few"):
        coplanarity_score(flat[:3])

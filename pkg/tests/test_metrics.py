from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from markercap.geometry import RigidTransform
from markercap.mesh import MeshSDF, SphereSDF, box_mesh, closest_point_on_triangles, icosphere
from markercap.metrics import (
    MetricError,
    diversity_coherence,
    jerk,
    mre,
    msnr,
    msnr_db,
    penetration,
    penetration_depth,
    pose_features,
    smooth3,
    summary,
)


def test_msnr_arithmetic():
    r = msnr_db(1.0, 0.1)
    assert r.db == pytest.approx(10.0, abs=1e-12) and not r.capped


def test_msnr_on_linear_series_is_capped():
    r = msnr(np.linspace(-1, 2, 50))
    assert r.capped and r.db >= 10 * np.log10(np.mean(np.linspace(-1, 2, 50) ** 2) / 1e-12) - 1e-9
    np.testing.assert_allclose(smooth3(np.arange(10.0)), np.arange(10.0), atol=1e-12)
    with pytest.raises(MetricError):
        msnr(np.zeros(2))


def test_msnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 4, 200)
    v = np.stack([np.sin(t), np.cos(1.3 * t)], axis=1)
    noise = rng.normal(size=v.shape)
    vals = [msnr(v + s * noise).db for s in np.linspace(0.01, 0.5, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_msnr_scale_invariance(c, seed):
    v = np.random.default_rng(seed).normal(size=(40, 3))
    assert msnr(c * v).db == pytest.approx(msnr(v).db, abs=1e-9)


def test_jerk_examples():
    for dt in (0.01, 0.05, 0.1):
        t = np.arange(0, 1 + dt / 2, dt)
        assert jerk(t**3, dt) == pytest.approx(6.0, abs=1e-9)
    assert jerk(np.outer(np.arange(10.0), [1, 2, 3]), 0.05) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(MetricError):
        jerk(np.zeros(3), 0.1)


def test_jerk_scaling():
    rng = np.random.default_rng(1)
    x = np.cumsum(rng.normal(size=(30, 4, 3)), axis=0)
    j = jerk(x, 0.05)
    assert jerk(3.0 * x, 0.05) == pytest.approx(3.0 * j, rel=1e-12)
    assert jerk(x, 0.1) == pytest.approx(j / 8.0, rel=1e-12)


def test_diversity_coherence_examples():
    assert diversity_coherence(np.ones((20, 4))) == (0.0, 1.0)
    centres = np.eye(5) * 10
    X = np.repeat(centres, 6, axis=0)
    d, c = diversity_coherence(X)
    assert d > 0 and c == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    Y = np.repeat(centres, 8, axis=0) + rng.normal(0, 0.3, (40, 5))
    a = diversity_coherence(Y)
    b = diversity_coherence(Y[rng.permutation(len(Y))])
    assert a == b
    with pytest.raises(MetricError):
        diversity_coherence(np.zeros((3, 2)))


def test_pose_features_are_rigid_invariant():
    rng = np.random.default_rng(3)
    hands = [RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3)) for _ in range(6)]
    objs = [RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3)) for _ in range(6)]
    phi = rng.normal(size=(6, 27))
    G = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))
    a = pose_features(phi, hands, objs)
    b = pose_features(phi, [G.compose(h) for h in hands], [G.compose(o) for o in objs])
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.shape == (6, 36)


def test_penetration_examples():
    V, F = box_mesh((0.04, 0.04, 0.04), cell=0.01)
    sdf = MeshSDF(V, F)
    outside = np.array([[0.05, 0, 0], [0, 0.03, 0.03]])
    assert penetration_depth(outside, sdf) == 0.0
    inside = np.vstack([outside, [[0.018, 0.0, 0.0]]])
    assert penetration_depth(inside, sdf) == pytest.approx(0.002, abs=1e-12)


def test_penetration_vs_analytic_sphere():
    rng = np.random.default_rng(4)
    sphere = SphereSDF(np.zeros(3), 0.05)
    frames = [rng.normal(0, 0.04, (200, 3)) for _ in range(5)]
    st_ = penetration(frames, sphere)
    brute = [max(0.0, -(np.linalg.norm(f, axis=1) - 0.05).min()) for f in frames]
    np.testing.assert_allclose(st_.per_frame, brute, atol=1e-9)
    assert st_.mean == pytest.approx(np.mean(brute), abs=1e-9)


def test_mesh_sdf_matches_brute_force_and_is_rigid_invariant():
    V, F = icosphere(0.05, 2)
    sdf = MeshSDF(V, F)
    rng = np.random.default_rng(5)
    P = rng.normal(0, 0.04, (100, 3))
    q, _ = closest_point_on_triangles(P[:, None, :], V[F[:, 0]][None], V[F[:, 1]][None], V[F[:, 2]][None])
    brute = np.linalg.norm(q - P[:, None, :], axis=-1).min(axis=1)
    np.testing.assert_allclose(np.abs(sdf(P)), brute, atol=1e-12)
    G = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))
    a = penetration([P], sdf, [RigidTransform.identity()])
    b = penetration([G.apply(P)], sdf, [G])
    assert a.mean == pytest.approx(b.mean, abs=1e-12)
    with pytest.raises(MetricError):
        penetration([P], sdf, [None])


def test_mre_examples():
    rng = np.random.default_rng(6)
    P = rng.normal(size=(4, 10, 3))
    assert mre(P, P) == (0.0, 0.0)
    d = rng.normal(size=(4, 10, 3))
    d *= 0.001 / np.linalg.norm(d, axis=-1, keepdims=True)
    m, s = mre(P + d, P)
    assert m == pytest.approx(0.001, rel=1e-12) and s == pytest.approx(0.0, abs=1e-15)
    vis = np.zeros((4, 10), bool)
    with pytest.raises(MetricError):
        mre(P, P, vis)
    vis[0, 0] = True
    assert mre(P + d, P, vis)[0] == pytest.approx(0.001)


def test_summary():
    s = summary([1.0, 2.0, 3.0, None, float("nan")])
    assert s["n"] == 3 and s["mean"] == 2.0 and s["max"] == 3.0
    assert summary([]) == {"n": 0}

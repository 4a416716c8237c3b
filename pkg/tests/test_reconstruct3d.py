from __future__ import annotations

from itertools import product

import numpy as np
import pytest

from markercap.geometry import project_point
from markercap.marker_model import MarkerID, allocate_patches, build_codebook
from markercap.reconstruct3d import (
    MarkerObservation,
    MarkerTrack,
    cleanup_tracks,
    fill_gaps,
    patch_cluster_filter,
    triangulate_frame,
    zscore_filter,
)


def _templates():
    tpl, _ = allocate_patches([("P", "seg", 3, 3, 0.006), ("Q", "seg", 2, 2, 0.006)], build_codebook())
    return tpl


def test_triangulate_frame_requires_three_views(ring_cameras):
    X = np.array([0.02, -0.01, 0.03])
    a, b = MarkerID("P", 0), MarkerID("P", 1)
    ident = {}
    for k, cam in enumerate(ring_cameras):
        ident[cam.id] = [(a, project_point(cam, X))]
        if k < 2:
            ident[cam.id].append((b, project_point(cam, X + 0.01)))
    out = triangulate_frame(ident, ring_cameras)
    assert set(out) == {a}
    np.testing.assert_allclose(out[a].position, X, atol=1e-9)
    assert out[a].views == 6


def test_triangulate_frame_rejects_outlier_view(ring_cameras):
    X = np.array([0.0, 0.05, -0.02])
    a = MarkerID("P", 3)
    ident = {c.id: [(a, project_point(c, X))] for c in ring_cameras}
    ident[ring_cameras[2].id] = [(a, project_point(ring_cameras[2], X) + 40.0)]
    out = triangulate_frame(ident, ring_cameras)
    assert out[a].views == 5
    np.testing.assert_allclose(out[a].position, X, atol=1e-9)


def test_patch_cluster_filter_keeps_largest_cluster():
    tpl = _templates()
    frame = {MarkerID("P", k): MarkerObservation(np.array([0.006 * k, 0, 0]), 3, 0.5) for k in range(6)}
    frame[MarkerID("P", 9)] = MarkerObservation(np.array([0.5, 0, 0]), 3, 0.1)
    frame[MarkerID("Q", 0)] = MarkerObservation(np.array([0.9, 0, 0]), 3, 0.1)
    out = patch_cluster_filter(frame, tpl)
    assert MarkerID("P", 9) not in out
    assert MarkerID("Q", 0) in out
    assert len(out) == 7


def test_patch_cluster_filter_tie_prefers_lower_reprojection_error():
    tpl = _templates()
    frame = {
        MarkerID("Q", 0): MarkerObservation(np.zeros(3), 3, 0.9),
        MarkerID("Q", 1): MarkerObservation(np.array([0.3, 0, 0]), 3, 0.2),
    }
    out = patch_cluster_filter(frame, tpl)
    assert list(out) == [MarkerID("Q", 1)]


def _fill_oracle(present: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = values.copy()
    T = len(values)
    for i in range(T):
        if present[i]:
            continue
        lefts = [j for j in (i - 1, i - 2) if j >= 0 and present[j]]
        rights = [j for j in (i + 1, i + 2) if j < T and present[j]]
        if lefts and rights:
            l, r = lefts[0], rights[0]
            out[i] = values[l] + (values[r] - values[l]) * (i - l) / (r - l)
    return out


@pytest.mark.parametrize("pattern", list(product([0, 1], repeat=5)))
def test_fill_gaps_matches_oracle_on_all_presence_patterns(pattern):
    present = np.array([1, 1, *pattern, 1, 1], dtype=bool)
    t = np.arange(len(present), dtype=float)
    vals = np.stack([t, t**2, -t], axis=1)
    P = np.where(present[:, None], vals, np.nan)
    out = fill_gaps(MarkerTrack(MarkerID("P", 0), P))
    oracle = np.stack([_fill_oracle(present, np.where(present, vals[:, k], np.nan)) for k in range(3)], axis=1)
    np.testing.assert_array_equal(np.isnan(out.positions), np.isnan(oracle))
    np.testing.assert_allclose(out.positions[~np.isnan(oracle)], oracle[~np.isnan(oracle)])
    np.testing.assert_array_equal(out.positions[present], P[present])
    assert np.array_equal(out.interp, ~present & ~np.isnan(oracle[:, 0]))


def test_zscore_keeps_clean_constant_velocity_track():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.uniform(-0.005, 0.005, 3)
        P = rng.uniform(-0.2, 0.2, 3) + np.arange(120)[:, None] * v
        out = zscore_filter(MarkerTrack(MarkerID("P", 0), P))
        assert out.present.all()


def test_zscore_removes_spikes_and_is_idempotent_on_output():
    rng = np.random.default_rng(2)
    T = 200
    t = np.arange(T)[:, None]
    P = 0.05 * np.sin(0.05 * t + rng.uniform(0, 6, 3)) + rng.uniform(-0.2, 0.2, 3)
    spikes = rng.choice(np.arange(10, T - 10), 8, replace=False)
    for s in spikes:
        d = rng.normal(size=3)
        P[s] += 0.1 * d / np.linalg.norm(d)
    out = zscore_filter(MarkerTrack(MarkerID("P", 0), P))
    assert set(np.flatnonzero(~out.present)) == set(spikes)
    again = zscore_filter(out)
    np.testing.assert_array_equal(again.present, out.present)


def test_zscore_skips_sparse_windows():
    P = np.full((11, 3), np.nan)
    P[5] = 10.0
    P[4] = 0.0
    P[6] = 0.0
    out = zscore_filter(MarkerTrack(MarkerID("P", 0), P))
    assert out.present[5]


def test_cleanup_tracks_fills_single_dropout():
    tpl = _templates()
    frames = []
    for k in range(15):
        if k == 7:
            frames.append({})
            continue
        frames.append({MarkerID("P", 0): MarkerObservation(np.array([0.001 * k, 0, 0]), 4, 0.3)})
    out = cleanup_tracks(frames, tpl)
    obs = out[7][MarkerID("P", 0)]
    assert obs.interp
    np.testing.assert_allclose(obs.position, [0.007, 0, 0])

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from markercap.geometry import RigidTransform, rotation_about_axis
from markercap.rubik import (
    FACE_NORMALS,
    FACES,
    PLACEHOLDER,
    CubeModel,
    CubeState,
    RubikConfig,
    RubikError,
    accumulate_and_snap,
    canonical_marker_positions,
    coplanarity_signature,
    detect_rotation,
    local_grid,
    parse_moves,
    partition_blocks,
    quarter_turn,
    reconstruct_sequence,
    register_blocks,
    relative_angle,
    write_rubik_outputs,
)
from markercap.io import read_json, read_jsonl
from markercap.synth import cube_marker_track, tumbling_pose

MODEL = CubeModel()


def _turned(face: str, angle: float, pose: RigidTransform | None = None) -> np.ndarray:
    """Markers with the half on ``face``'s side rotated by ``angle`` about its normal (independent construction)."""
    X, _ = canonical_marker_positions()
    n = FACE_NORMALS[face]
    sel = X @ n > 0
    X[sel] = X[sel] @ rotation_about_axis(n, angle).T
    return X if pose is None else pose.apply(X)


def test_local_grid_and_marker_count():
    g = local_grid(0.005)
    np.testing.assert_allclose(g[0], [-0.0075, -0.0075, 0.0])
    np.testing.assert_allclose(g[15], [0.0075, 0.0075, 0.0])
    X, labels = canonical_marker_positions()
    assert X.shape == (384, 3) and len(set(labels)) == 384
    assert len(set(MODEL.marker_ids)) == 384
    # every marker lies on the cube surface, inside its own facelet
    assert np.allclose(np.abs(X).max(axis=1), MODEL.edge / 2)
    C = MODEL.facelet_centers()
    own = C[[lab[0] for lab in labels]]
    assert np.abs(X - own).max() <= 0.0075 + 1e-12


def test_partition_examples():
    p = partition_blocks("U")
    moving, still = p.labels()
    assert sorted(still) == sorted(["D0", "D1", "D2", "D3", "L2", "L3", "F2", "F3", "R2", "R3", "B2", "B3"])
    assert sorted(moving) == sorted(["U0", "U1", "U2", "U3", "L0", "L1", "F0", "F1", "R0", "R1", "B0", "B1"])
    for face in FACES:
        q = partition_blocks(face)
        assert len(q.moving) == len(q.stationary) == 12
        assert set(q.moving) | set(q.stationary) == set(range(24))
    d = partition_blocks("D")
    assert d.moving == p.stationary and d.stationary == p.moving
    with pytest.raises(RubikError):
        partition_blocks("X")


def test_signature_rest_and_45_degrees():
    state = CubeState()
    sig = coplanarity_signature(canonical_marker_positions()[0], state)
    assert max(sig.faces.values()) < 1e-12
    assert max(sig.pairs.values()) < 1e-12
    M = _turned("U", np.radians(45))
    sig = coplanarity_signature(M, state)
    assert sig.faces["U"] < 1e-12 and sig.faces["D"] < 1e-12
    slots = state.marker_slots()
    for face in "LRFB":
        k = FACES.index(face)
        P = M[(slots // 4) == k]
        oracle = np.linalg.svd((P - P.mean(0)).T, compute_uv=False)[-1] / np.sqrt(len(P))
        assert sig.faces[face] == pytest.approx(oracle, rel=1e-12)
        assert sig.faces[face] > 0.0009
    # raw singular value mode
    raw = coplanarity_signature(M, state, normalize=False)
    assert raw.faces["L"] == pytest.approx(sig.faces["L"] * 8.0, rel=1e-12)


def test_indeterminate_cluster():
    M = canonical_marker_positions()[0]
    slots = CubeState().marker_slots()
    M[(slots // 4) == 0] = PLACEHOLDER
    keep = np.flatnonzero((slots // 4) == 0)[:3]
    M[keep] = canonical_marker_positions()[0][keep]
    sig = coplanarity_signature(M, CubeState())
    assert sig.faces["U"] is None and sig.faces["D"] is not None


def _scores(face, angles):
    state = CubeState()
    return [coplanarity_signature(_turned(face, a), state, pairs=False).faces for a in angles]


def test_detect_rotation_rules():
    rest = [0.0] * 5
    assert detect_rotation(_scores("U", rest)) is None
    angles = rest + list(np.radians(np.linspace(10, 80, 8)))
    assert detect_rotation(_scores("U", angles)) == ("U", 5)
    assert detect_rotation(_scores("D", angles)) == ("U", 5)
    assert detect_rotation(_scores("L", angles))[0] == "R"
    # a two-frame blip is not enough
    assert detect_rotation(_scores("F", rest + list(np.radians([30, 30])) + rest)) is None
    # both signatures at once -> ambiguous
    bad = [{"U": 0.0, "D": 0.0, "L": 0.0, "R": 0.0, "F": 0.0, "B": 0.0}] * 3
    assert detect_rotation(bad) is None
    amb = [{f: 0.01 for f in FACES} | {"U": 0.0, "D": 0.0, "R": 0.0, "L": 0.0}] * 3
    assert detect_rotation(amb) is None
    with pytest.raises(RubikError):
        detect_rotation(bad, tau_co=0.001, tau_non=0.001)


_score = st.one_of(st.none(), st.floats(0.0, 0.01))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.fixed_dictionaries({f: _score for f in FACES}), min_size=3, max_size=8))
def test_two_axes_never_qualify_together(scores):
    # a qualifying axis has a measured planar cluster, which lies in the ring of both other axes
    detect_rotation(scores)


def test_rigid_motion_is_never_detected():
    state = CubeState()
    rng = np.random.default_rng(0)
    X = canonical_marker_positions()[0]
    scores = []
    for _ in range(30):
        pose = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))
        scores.append(coplanarity_signature(pose.apply(X), state, pairs=False).faces)
    assert max(v for s in scores for v in s.values()) < 1e-12
    assert detect_rotation(scores) is None


def test_register_blocks():
    rng = np.random.default_rng(1)
    pose = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3))
    state = CubeState()
    T1, T2 = register_blocks(pose.apply(canonical_marker_positions()[0]), partition_blocks("U"), state)
    for T in (T1, T2):
        np.testing.assert_allclose(T.rotation, pose.rotation, atol=1e-12)
        np.testing.assert_allclose(T.translation, pose.translation, atol=1e-12)
    M = _turned("U", np.radians(30), pose)
    T1, T2 = register_blocks(M, partition_blocks("U"), state)
    R_rel = T2.rotation @ T1.rotation.T
    np.testing.assert_allclose(R_rel, rotation_about_axis(pose.rotation @ FACE_NORMALS["U"], np.radians(30)), atol=1e-9)
    assert relative_angle(T1.rotation, T2.rotation, FACE_NORMALS["U"]) == pytest.approx(np.radians(30), abs=1e-9)
    # starve the moving block
    moving = np.isin(state.marker_slots(), partition_blocks("U").moving)
    M[np.flatnonzero(moving)[2:]] = PLACEHOLDER
    with pytest.raises(RubikError, match="underdetermined"):
        register_blocks(M, partition_blocks("U"), state)


def test_relative_angle_examples():
    z = np.array([0.0, 0, 1])
    assert relative_angle(np.eye(3), rotation_about_axis(z, np.pi / 2), z) == pytest.approx(np.pi / 2)
    assert relative_angle(np.eye(3), rotation_about_axis(z, -np.pi / 2), z) == pytest.approx(-np.pi / 2)
    with pytest.raises(RubikError):
        relative_angle(np.eye(3), rotation_about_axis(z, np.pi), z)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1.5, 1.5))
def test_relative_angle_recovers_constructed_angle(seed, theta):
    rng = np.random.default_rng(seed)
    R1 = Rotation.random(random_state=rng).as_matrix()
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    R2 = rotation_about_axis(R1 @ n, theta) @ R1
    assert relative_angle(R1, R2, n) == pytest.approx(theta, abs=1e-9)


def test_snapping_threshold_boundaries():
    s = accumulate_and_snap(CubeState(), "U", np.radians(86.9), 0)
    assert s.active is not None and not s.moves
    s = accumulate_and_snap(CubeState(), "U", np.radians(87.1), 0)
    assert s.active is None and [(m.face, m.dir) for m in s.moves] == [("U", 1)]
    s = accumulate_and_snap(CubeState(), "U", np.radians(88.5), 3)
    assert s.moves[0].frame == 3 and not np.array_equal(s.facelet_map(), np.arange(24))
    s = accumulate_and_snap(CubeState(), "U", np.radians(45), 0)
    assert s.active.angle == pytest.approx(np.radians(45)) and not s.moves
    s = accumulate_and_snap(s, "U", np.radians(-88), 1)
    assert s.active.angle == pytest.approx(np.radians(-43))
    with pytest.raises(RubikError, match="missed snap"):
        accumulate_and_snap(CubeState(), "U", np.radians(94), 0)
    with pytest.raises(RubikError):
        accumulate_and_snap(s, "R", 0.1, 2)
    # relabelling to the opposite face is allowed
    assert accumulate_and_snap(s, "D", 0.0, 2).active.face == "D"


def test_quarter_turns_are_a_group_action():
    s = CubeState()
    s.apply_turn("U", 1)
    s.apply_turn("U", -1)
    assert np.array_equal(s.facelet_map(), np.arange(24))
    for face in FACES:
        s = CubeState()
        for _ in range(4):
            s.apply_turn(face, 1)
        assert np.array_equal(s.facelet_map(), np.arange(24))
        Q = quarter_turn(face, 1)
        assert np.array_equal(Q @ Q.T, np.eye(3)) and round(np.linalg.det(Q)) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(FACES), st.sampled_from([-1, 1])), max_size=12))
def test_facelet_map_tracks_geometry(moves):
    """After any turn sequence the bookkept positions match the geometrically turned markers."""
    s = CubeState()
    X = canonical_marker_positions()[0]
    for face, d in moves:
        s.apply_turn(face, d)
        sel = X @ FACE_NORMALS[face] > 0
        X[sel] = X[sel] @ rotation_about_axis(FACE_NORMALS[face], d * np.pi / 2).T
    np.testing.assert_allclose(s.current_positions(), X, atol=1e-12)
    fm = s.facelet_map()
    assert sorted(fm) == list(range(24))


def test_sexy_move_fixture_zero_noise(tmp_path):
    want = parse_moves("RUR'U'") * 6
    seq = cube_marker_track(want)
    res = reconstruct_sequence(seq.track)
    assert [(m.face, m.dir) for m in res.moves] == want
    assert not res.diagnostics
    # each commit lands within the last few frames of its generated turn
    for m, (frame, _, _) in zip(res.moves, seq.moves):
        assert frame - 5 <= m.frame <= frame
    # onset within 2 frames of the generated turn start
    starts = [k for k in range(1, len(res.frames)) if res.frames[k].active and not res.frames[k - 1].active]
    assert len(starts) == 24
    gt_starts = [10 + 40 * k for k in range(24)]
    assert all(abs(a - b) <= 2 for a, b in zip(starts, gt_starts))
    rest = [k for k, r in enumerate(res.frames) if r.active is None]
    err = max(np.abs(res.frames[k].pose.translation - seq.poses[k].translation).max() for k in rest)
    assert err < 1e-6
    write_rubik_outputs(tmp_path / "rubik_track.jsonl", tmp_path / "moves.json", res)
    assert len(read_jsonl(tmp_path / "rubik_track.jsonl")) == len(seq.track)
    assert read_json(tmp_path / "moves.json")[0] == {"frame": res.moves[0].frame, "face": "R", "dir": -1}


def test_turn_speed_does_not_change_moves():
    want = parse_moves("FB'LD")
    for n in (12, 30, 60):
        res = reconstruct_sequence(cube_marker_track(want, frames_per_turn=n).track)
        assert [(m.face, m.dir) for m in res.moves] == want


def test_tumbling_cube_without_turns():
    seq = cube_marker_track([], rest_frames=200, pose_fn=tumbling_pose)
    res = reconstruct_sequence(seq.track)
    assert res.moves == []
    for rec, pose in zip(res.frames, seq.poses):
        assert np.abs(rec.pose.translation - pose.translation).max() <= 1e-6
        assert np.abs(rec.pose.rotation - pose.rotation).max() <= 1e-9


def test_track_shape_and_config_validation():
    with pytest.raises(RubikError):
        reconstruct_sequence(np.zeros((3, 10, 3)))
    with pytest.raises(ValueError):
        RubikConfig(tau_co=0.001, tau_non=0.0005).validate()
    with pytest.raises(RubikError):
        parse_moves("RX")
    assert parse_moves("R U' ") == [("R", -1), ("U", 1)]

"""2x2x2 cube state reconstruction from labelled facelet markers.

The cube frame has its origin at the cube centre with faces R=+x, L=-x,
B=+y, F=-y, U=+z, D=-z. Each of the 24 facelets carries a 4x4 marker grid.
A face turn is detected when the two face clusters perpendicular to one axis
stay planar while the four around it bend; the two 1x2x2 halves are then
registered separately, their relative angle is accumulated and the turn is
committed once it comes within the snapping tolerance of a quarter turn.

Turn directions are signs of the rotation angle about the face's outward
normal: ``dir = -1`` is a clockwise turn seen from outside (``U`` in
standard notation) and ``dir = +1`` counterclockwise (``U'``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import product

import numpy as np

from .geometry import GeometryError, RigidTransform, coplanarity_score, kabsch_align, rotation_log
from .io import write_json, write_jsonl
from .marker_model import MarkerID

FACES = ("U", "D", "L", "R", "F", "B")
FACE_NORMALS = {
    "U": np.array([0.0, 0.0, 1.0]),
    "D": np.array([0.0, 0.0, -1.0]),
    "L": np.array([-1.0, 0.0, 0.0]),
    "R": np.array([1.0, 0.0, 0.0]),
    "F": np.array([0.0, -1.0, 0.0]),
    "B": np.array([0.0, 1.0, 0.0]),
}
OPPOSITE = {"U": "D", "D": "U", "L": "R", "R": "L", "F": "B", "B": "F"}
AXES = (("U", "D"), ("R", "L"), ("F", "B"))
PLACEHOLDER = -1000.0


class RubikError(RuntimeError):
    pass


def _face_axes(face: str) -> tuple[np.ndarray, np.ndarray]:
    """(right, down) directions of a face as seen from outside, F at the bottom of U."""
    n = FACE_NORMALS[face]
    if face == "U":
        return np.array([1.0, 0, 0]), np.array([0.0, -1, 0])
    if face == "D":
        return np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    return np.cross([0.0, 0, 1], n), np.array([0.0, 0, -1])


def quarter_turn(face: str, direction: int) -> np.ndarray:
    """Exact integer rotation by ``direction`` x 90 degrees about the face normal."""
    n = FACE_NORMALS[face]
    K = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
    s = float(np.sign(direction))
    return np.rint(np.eye(3) + s * K + K @ K)  # sin = s, 1 - cos = 1


@dataclass(frozen=True)
class CubeModel:
    edge: float = 0.051
    spacing: float = 0.005

    def facelet_label(self, f: int) -> str:
        return f"{FACES[f // 4]}{f % 4}"

    def facelet_center(self, f: int) -> np.ndarray:
        face = FACES[f // 4]
        row, col = divmod(f % 4, 2)
        right, down = _face_axes(face)
        h = self.edge / 2
        return FACE_NORMALS[face] * h + (col - 0.5) * h * right + (row - 0.5) * h * down

    def facelet_centers(self) -> np.ndarray:
        return _tables(self)[0].copy()

    def cubie_of_facelet(self, f: int) -> int:
        """Index of the corner cubie in {-1,+1}^3 order holding facelet ``f`` when solved."""
        sx, sy, sz = (int(v > 0) for v in np.sign(self.facelet_center(f)))
        return 4 * sx + 2 * sy + sz

    @property
    def marker_ids(self) -> list[MarkerID]:
        return [MarkerID(f"cube_{self.facelet_label(f)}", 4 * i + j) for f in range(24) for i in range(4) for j in range(4)]

    @property
    def n_markers(self) -> int:
        return 384


def local_grid(spacing: float) -> np.ndarray:
    """Marker offsets m_ij = ((i - 1.5) s, (j - 1.5) s, 0) in facelet coordinates, row-major in (i, j)."""
    return np.array([[(i - 1.5) * spacing, (j - 1.5) * spacing, 0.0] for i in range(4) for j in range(4)])


@lru_cache(maxsize=8)
def _tables(model: CubeModel) -> tuple[np.ndarray, np.ndarray, tuple, np.ndarray]:
    """Facelet centres, solved marker positions, marker labels and per-marker cubie index."""
    centers = np.array([model.facelet_center(f) for f in range(24)])
    grid = local_grid(model.spacing)
    pos, labels = [], []
    for f in range(24):
        right, down = _face_axes(FACES[f // 4])
        for k, (i, j) in enumerate(product(range(4), range(4))):
            pos.append(centers[f] + grid[k, 0] * right + grid[k, 1] * down)
            labels.append((f, i, j))
    cubies = np.repeat([model.cubie_of_facelet(f) for f in range(24)], 16)
    for arr in (centers, cubies):
        arr.setflags(write=False)
    X = np.array(pos)
    X.setflags(write=False)
    return centers, X, tuple(labels), cubies


def canonical_marker_positions(model: CubeModel | None = None) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Positions of all 384 markers on the solved cube with their (facelet, i, j) labels."""
    _, X, labels, _ = _tables(model or CubeModel())
    return X.copy(), list(labels)


# ---------------------------------------------------------------------------
# state


@dataclass
class ActiveRotation:
    face: str
    angle: float  # radians about the face's outward normal
    onset: int
    reference: RigidTransform  # cube pose at the last rest frame


@dataclass
class Move:
    frame: int
    face: str
    dir: int

    def notation(self) -> str:
        return self.face + ("" if self.dir < 0 else "'")


@dataclass
class CubeState:
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    cubie_rot: np.ndarray = field(default_factory=lambda: np.broadcast_to(np.eye(3), (8, 3, 3)).copy())
    active: ActiveRotation | None = None
    moves: list[Move] = field(default_factory=list)

    def copy(self) -> "CubeState":
        return CubeState(self.pose, self.cubie_rot.copy(), None if self.active is None else replace(self.active), list(self.moves))

    def apply_turn(self, face: str, direction: int, model: CubeModel | None = None) -> None:
        """Rotate the cubies on ``face``'s side by an exact quarter turn (cube frame)."""
        model = model or CubeModel()
        Q = quarter_turn(face, direction)
        n = FACE_NORMALS[face]
        for k, (sx, sy, sz) in enumerate(product((-1, 1), repeat=3)):
            home = np.array([sx, sy, sz], dtype=float)
            if n @ (self.cubie_rot[k] @ home) > 0:
                self.cubie_rot[k] = Q @ self.cubie_rot[k]

    def facelet_map(self, model: CubeModel | None = None) -> np.ndarray:
        """``facelet_map[p]`` is the slot currently holding the sticker solved at slot ``p``."""
        C, _, _, cubies = _tables(model or CubeModel())
        q = np.einsum("pij,pj->pi", self.cubie_rot[cubies[::16]], C)
        return np.argmin(np.linalg.norm(C[None, :, :] - q[:, None, :], axis=2), axis=1)

    def current_positions(self, model: CubeModel | None = None) -> np.ndarray:
        """Cube-frame positions of every marker in the current (rest) configuration."""
        _, X, _, cubies = _tables(model or CubeModel())
        return np.einsum("nij,nj->ni", self.cubie_rot[cubies], X)

    def marker_slots(self, model: CubeModel | None = None) -> np.ndarray:
        return np.repeat(self.facelet_map(model), 16)


@dataclass(frozen=True)
class BlockPartition:
    face: str
    moving: tuple[int, ...]
    stationary: tuple[int, ...]

    def labels(self, model: CubeModel | None = None) -> tuple[list[str], list[str]]:
        model = model or CubeModel()
        return [model.facelet_label(f) for f in self.moving], [model.facelet_label(f) for f in self.stationary]


def partition_blocks(face: str, model: CubeModel | None = None) -> BlockPartition:
    """Split the 24 facelet slots into the half containing ``face`` and the other half."""
    if face not in FACE_NORMALS:
        raise RubikError(f"unknown face {face!r}")
    model = model or CubeModel()
    side = _tables(model)[0] @ FACE_NORMALS[face] > 0
    return BlockPartition(face, tuple(np.flatnonzero(side).tolist()), tuple(np.flatnonzero(~side).tolist()))


# ---------------------------------------------------------------------------
# coplanarity


def present_mask(markers: np.ndarray) -> np.ndarray:
    M = np.asarray(markers, dtype=float)
    return np.all(np.isfinite(M), axis=1) & ~np.all(M == PLACEHOLDER, axis=1)


@dataclass
class Signature:
    faces: dict[str, float | None]  # None = indeterminate
    pairs: dict[tuple[int, int], float | None]


_FACE_PAIRS = ((0, 1), (2, 3), (0, 2), (1, 3))


def coplanarity_signature(
    markers: np.ndarray, state: CubeState, model: CubeModel | None = None, normalize: bool = True, pairs: bool = True
) -> Signature:
    """Coplanarity of each face cluster and of each edge-adjacent facelet pair within a face.

    Clusters are formed from the slots the markers currently occupy. A
    cluster with fewer than four present markers is indeterminate.
    """
    model = model or CubeModel()
    M = np.asarray(markers, dtype=float)
    ok = present_mask(M)
    slots = state.marker_slots(model)
    members = [ok & (slots == q) for q in range(24)]

    def score(slot_set) -> float | None:
        sel = np.logical_or.reduce([members[q] for q in slot_set])
        if sel.sum() < 4:
            return None
        return coplanarity_score(M[sel], normalize)

    faces = {face: score([4 * k + q for q in range(4)]) for k, face in enumerate(FACES)}
    pair_scores = {}
    if pairs:
        for k in range(6):
            for a, b in _FACE_PAIRS:
                pair_scores[(4 * k + a, 4 * k + b)] = score([4 * k + a, 4 * k + b])
    return Signature(faces, pair_scores)


def _axis_qualifies(scores: dict[str, float | None], axis: tuple[str, str], tau_co: float, tau_non: float) -> bool:
    pair = [scores[f] for f in axis]
    ring = [scores[f] for f in FACES if f not in axis]
    pair_known = [s for s in pair if s is not None]
    ring_known = [s for s in ring if s is not None]
    return (
        len(pair_known) >= 1
        and all(s < tau_co for s in pair_known)
        and len(ring_known) >= 2
        and all(s > tau_non for s in ring_known)
    )


def detect_rotation(
    scores: list[dict[str, float | None]], tau_co: float = 0.0008, tau_non: float = 0.0009, persistence: int = 3
) -> tuple[str, int] | None:
    """Earliest axis whose signature holds for ``persistence`` consecutive frames.

    The opposing clusters must stay below ``tau_co`` while the four clusters
    around the axis exceed ``tau_non``; indeterminate clusters are skipped
    provided one of the pair and two of the ring are measured. Returns the
    axis (named by its first face: U, R or F) and the index of the first
    frame of the run.
    """
    if not tau_co < tau_non:
        raise RubikError("tau_co must be below tau_non")
    runs = {axis: 0 for axis in AXES}
    for k, s in enumerate(scores):
        done = []
        for axis in AXES:
            runs[axis] = runs[axis] + 1 if _axis_qualifies(s, axis, tau_co, tau_non) else 0
            if runs[axis] >= persistence:
                done.append(axis)
        if len(done) > 1:
            raise RubikError(f"ambiguous signature at frame offset {k}: axes {[a[0] for a in done]}")
        if done:
            return done[0][0], k - persistence + 1
    return None


# ---------------------------------------------------------------------------
# block registration and angles


def _fit(model_pts: np.ndarray, obs: np.ndarray, what: str, min_markers: int) -> RigidTransform:
    if len(obs) < max(min_markers, 3):
        raise RubikError(f"block underdetermined: {what} has {len(obs)} visible markers")
    try:
        return kabsch_align(model_pts, obs)
    except GeometryError as exc:
        raise RubikError(f"block underdetermined: {what}: {exc}") from exc


def register_blocks(
    markers: np.ndarray, partition: BlockPartition, state: CubeState, model: CubeModel | None = None, min_markers: int = 3
) -> tuple[RigidTransform, RigidTransform]:
    """Kabsch fits of the stationary and the moving half against their rest configuration."""
    model = model or CubeModel()
    M = np.asarray(markers, dtype=float)
    ok = present_mask(M)
    X = state.current_positions(model)
    slots = state.marker_slots(model)
    moving = np.isin(slots, partition.moving)
    T1 = _fit(X[ok & ~moving], M[ok & ~moving], "stationary block", min_markers)
    T2 = _fit(X[ok & moving], M[ok & moving], "moving block", min_markers)
    return T1, T2


def relative_angle(R1: np.ndarray, R2: np.ndarray, axis: np.ndarray) -> float:
    """Signed angle of ``R2 R1^T`` about ``R1 @ axis`` (``axis`` given in block-1 coordinates)."""
    w = rotation_log(np.asarray(R2) @ np.asarray(R1).T)
    theta = float(np.linalg.norm(w))
    if theta > np.pi - 1e-6:
        raise RubikError("relative rotation near 180 degrees: sign is ambiguous")
    n = np.asarray(R1) @ np.asarray(axis, dtype=float)
    s = np.sign(n @ w)
    return float(s * theta) if s != 0 else 0.0


def accumulate_and_snap(
    state: CubeState,
    face: str,
    increment: float,
    frame: int,
    model: CubeModel | None = None,
    snap_deg: float = 3.0,
    miss_deg: float = 93.0,
) -> CubeState:
    """Add ``increment`` radians to the active turn on ``face`` and commit it near +-90 degrees.

    Relabelling the active turn to the opposite face of the same axis is
    allowed (both halves see the same relative angle); a different axis is
    an error. The input state is not modified.
    """
    out = state.copy()
    if out.active is None:
        out.active = ActiveRotation(face, 0.0, frame, out.pose)
    elif out.active.face != face:
        if OPPOSITE[out.active.face] != face:
            raise RubikError(f"turn on {face} while {out.active.face} is active")
        out.active.face = face
    out.active.angle += increment
    deg = np.degrees(out.active.angle)
    for k in (-1, 1):
        if abs(deg - 90.0 * k) <= snap_deg:
            out.apply_turn(face, k, model)
            out.moves.append(Move(frame, face, k))
            out.active = None
            return out
    if abs(deg) > miss_deg:
        raise RubikError(f"missed snap: accumulated {deg:.2f} degrees on {face}")
    return out


# ---------------------------------------------------------------------------
# sequence driver


@dataclass
class RubikConfig:
    tau_co: float = 0.0008
    tau_non: float = 0.0009
    normalize: bool = True
    persistence: int = 3
    lookahead: int = 100
    snap_deg: float = 3.0
    miss_deg: float = 93.0
    min_block_markers: int = 3
    onset_deg: float = 1.0

    def validate(self) -> None:
        if not 0 < self.tau_co < self.tau_non:
            raise ValueError("rubik thresholds must satisfy 0 < tau_co < tau_non")
        if self.persistence < 1 or self.lookahead < self.persistence:
            raise ValueError("rubik persistence must be >= 1 and lookahead >= persistence")
        if not 0 < self.snap_deg < 45 or self.miss_deg < 90 + self.snap_deg:
            raise ValueError("rubik snap_deg must lie in (0, 45) and miss_deg be at least 90 + snap_deg")


@dataclass
class FrameRecord:
    frame: int
    pose: RigidTransform | None
    active: tuple[str, float] | None

    def to_record(self) -> dict:
        rec = {"frame": self.frame, "R": None, "t": None, "active": None}
        if self.pose is not None:
            rec["R"] = self.pose.rotation.ravel().tolist()
            rec["t"] = self.pose.translation.tolist()
        if self.active is not None:
            rec["active"] = {"face": self.active[0], "angle": self.active[1]}
        return rec


@dataclass
class RubikResult:
    frames: list[FrameRecord]
    moves: list[Move]
    diagnostics: list[tuple[int, str]]
    final_state: CubeState


def _rot_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(rotation_log(R)))


class _Tracker:
    def __init__(self, track: np.ndarray, model: CubeModel, config: RubikConfig):
        self.track = track
        self.model = model
        self.cfg = config
        self.diag: list[tuple[int, str]] = []
        self._cache: dict[tuple[bytes, int], dict] = {}

    def scores(self, state: CubeState, frames: range) -> list[dict]:
        key = state.cubie_rot.tobytes()
        out = []
        for f in frames:
            if (key, f) not in self._cache:
                sig = coplanarity_signature(self.track[f], state, self.model, self.cfg.normalize, pairs=False)
                self._cache[(key, f)] = sig.faces
            out.append(self._cache[(key, f)])
        return out

    def rest_pose(self, state: CubeState, f: int) -> RigidTransform | None:
        M = self.track[f]
        ok = present_mask(M)
        if ok.sum() < 3:
            self.diag.append((f, "cube underdetermined"))
            return None
        try:
            return kabsch_align(state.current_positions(self.model)[ok], M[ok])
        except GeometryError as exc:
            self.diag.append((f, f"cube underdetermined: {exc}"))
            return None

    def blocks(self, state: CubeState, face: str, f: int):
        """(angle about ``face``, transform of the + half, transform of the - half) or None."""
        part = partition_blocks(face, self.model)
        try:
            T_minus, T_plus = register_blocks(self.track[f], part, state, self.model, self.cfg.min_block_markers)
            theta = relative_angle(T_minus.rotation, T_plus.rotation, FACE_NORMALS[face])
        except RubikError as exc:
            self.diag.append((f, str(exc)))
            return None
        return theta, T_plus, T_minus


def reconstruct_sequence(
    track: np.ndarray, model: CubeModel | None = None, config: RubikConfig | None = None, first_frame: int = 0
) -> RubikResult:
    """Pose track and move list for a labelled cube marker track ``(T, 384, 3)``.

    Missing markers are NaN or the placeholder value. At rest the whole cube
    is registered at once; a detected turn is followed by registering both
    halves until the accumulated angle snaps. The half that rotated away from
    the last rest pose names the turned face.
    """
    model = model or CubeModel()
    config = config or RubikConfig()
    config.validate()
    track = np.asarray(track, dtype=float)
    if track.ndim != 3 or track.shape[1:] != (384, 3):
        raise RubikError(f"expected a (T, 384, 3) marker track, got {track.shape}")
    T = len(track)
    tk = _Tracker(track, model, config)
    state = CubeState()
    out: list[FrameRecord] = []
    last_pose: RigidTransform | None = None

    def rest(f: int) -> None:
        nonlocal last_pose
        pose = tk.rest_pose(state, f)
        if pose is not None:
            last_pose = pose
            state.pose = pose
        out.append(FrameRecord(first_frame + f, pose, None))

    k = 0
    while k < T:
        window = range(k, min(T, k + config.lookahead))
        try:
            det = detect_rotation(tk.scores(state, window), config.tau_co, config.tau_non, config.persistence)
        except RubikError as exc:
            tk.diag.append((k, str(exc)))
            rest(k)
            k += 1
            continue
        if det is None:
            # keep the last persistence-1 frames: a run may start there
            stop = window.stop if window.stop == T else max(k + 1, window.stop - config.persistence + 1)
            for f in range(k, stop):
                rest(f)
            k = stop
            continue
        axis_face, offset = det
        start = k + offset
        # walk back to the first frame whose relative angle exceeds the onset threshold
        onset = start
        while onset > k:
            b = tk.blocks(state, axis_face, onset - 1)
            if b is None or abs(np.degrees(b[0])) < config.onset_deg:
                break
            onset -= 1
        for f in range(k, onset):
            rest(f)
        reference = last_pose if last_pose is not None else state.pose
        angle = 0.0
        f = onset
        committed = False
        while f < T:
            b = tk.blocks(state, axis_face, f)
            if b is None:
                out.append(FrameRecord(first_frame + f, None, (axis_face, angle)))
                f += 1
                continue
            theta, T_plus, T_minus = b
            plus_moved = _rot_angle(T_plus.rotation @ reference.rotation.T) >= _rot_angle(T_minus.rotation @ reference.rotation.T)
            face = axis_face if plus_moved else OPPOSITE[axis_face]
            still = T_minus if plus_moved else T_plus
            # the same relative angle measured about the opposite face's normal keeps its sign
            try:
                state = accumulate_and_snap(state, face, theta - angle, first_frame + f, model, config.snap_deg, config.miss_deg)
            except RubikError as exc:
                tk.diag.append((f, str(exc)))
                state.active = None
                out.append(FrameRecord(first_frame + f, still, None))
                f += 1
                committed = True
                break
            angle = theta
            state.pose = still
            if state.active is None:
                last_pose = still
                out.append(FrameRecord(first_frame + f, still, None))
                f += 1
                committed = True
                break
            out.append(FrameRecord(first_frame + f, still, (face, state.active.angle)))
            f += 1
        k = f
        if not committed:
            tk.diag.append((f - 1, "sequence ended during an active turn"))
    return RubikResult(out, list(state.moves), tk.diag, state)


def write_rubik_outputs(track_path, moves_path, result: RubikResult) -> None:
    write_jsonl(track_path, (r.to_record() for r in result.frames))
    write_json(moves_path, [{"frame": m.frame, "face": m.face, "dir": m.dir} for m in result.moves])


def parse_moves(notation: str) -> list[tuple[str, int]]:
    """``"R U R' U'"`` (spaces optional) -> [(face, dir)] with clockwise = -1."""
    out = []
    s = notation.replace(" ", "")
    i = 0
    while i < len(s):
        face = s[i]
        if face not in FACE_NORMALS:
            raise RubikError(f"unknown face {face!r} in {notation!r}")
        i += 1
        if i < len(s) and s[i] == "'":
            out.append((face, 1))
            i += 1
        else:
            out.append((face, -1))
    return out

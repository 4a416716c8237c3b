"""Camera projection, triangulation, rigid alignment and rotation helpers.

Everything here is a pure function of numpy inputs. Lengths are meters,
image coordinates are pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometric kernel receives inputs it cannot handle."""


@dataclass(frozen=True)
class CameraModel:
    """Ideal pinhole camera. ``rotation``/``translation`` map world to camera."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"camera {self.id}: focal lengths must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError(f"camera {self.id}: rotation is not in SO(3)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix."""
        return self.K @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            id=str(d["id"]),
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["R"], dtype=float).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=float),
        )


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self * other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def rotation_about_axis(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` via quaternion extraction (shorter arc)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # Shepperd's method for a well-conditioned quaternion
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    vec_norm = np.linalg.norm(q[1:])
    if vec_norm < 1e-15:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vec_norm, q[0])
    return q[1:] / vec_norm * angle


def project_point(camera: CameraModel, point: np.ndarray) -> np.ndarray:
    """Project one world point to pixels. Raises for non-positive depth."""
    pc = camera.to_camera(np.asarray(point, dtype=float).reshape(3))
    if pc[2] <= 0:
        raise GeometryError("point is behind camera")
    return np.array([camera.fx * pc[0] / pc[2] + camera.cx, camera.fy * pc[1] / pc[2] + camera.cy])


def project_points(camera: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(uv, depth)``; uv is NaN where depth <= 0."""
    pc = camera.to_camera(np.atleast_2d(points))
    depth = pc[:, 2]
    uv = np.full((len(pc), 2), np.nan)
    ok = depth > 0
    uv[ok, 0] = camera.fx * pc[ok, 0] / depth[ok] + camera.cx
    uv[ok, 1] = camera.fy * pc[ok, 1] / depth[ok] + camera.cy
    return uv, depth


def reprojection_error(camera: CameraModel, point3d: np.ndarray, observed2d: np.ndarray) -> float:
    return float(np.linalg.norm(project_point(camera, point3d) - np.asarray(observed2d, dtype=float)))


@dataclass
class Triangulation:
    point: np.ndarray
    residuals: np.ndarray  # per-view reprojection error, pixels
    inliers: np.ndarray  # indices into the observation list

    @property
    def mean_reprojection(self) -> float:
        return float(np.mean(self.residuals[self.inliers])) if len(self.inliers) else float("nan")


def _dlt(projections: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    # rows u*P3 - P1, v*P3 - P2, normalised per row for conditioning
    A = np.concatenate(
        [uvs[:, 0:1] * projections[:, 2] - projections[:, 0], uvs[:, 1:2] * projections[:, 2] - projections[:, 1]]
    )
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] <= 0 or s[0] / s[-2] > 1e12:
        raise GeometryError("degenerate configuration")
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        raise GeometryError("degenerate configuration")
    return X[:3] / X[3]


def _residuals(cameras: Sequence[CameraModel], uvs: np.ndarray, point: np.ndarray) -> np.ndarray:
    res = np.empty(len(cameras))
    for i, (cam, uv) in enumerate(zip(cameras, uvs)):
        pc = cam.to_camera(point)
        if pc[2] <= 0:
            res[i] = np.inf
        else:
            res[i] = np.hypot(cam.fx * pc[0] / pc[2] + cam.cx - uv[0], cam.fy * pc[1] / pc[2] + cam.cy - uv[1])
    return res


def triangulate_with_residuals(observations: Sequence[tuple[CameraModel, np.ndarray]]) -> Triangulation:
    if len(observations) < 3:
        raise GeometryError("insufficient views: at least 3 observations required")
    cams = [c for c, _ in observations]
    uvs = np.array([np.asarray(uv, dtype=float) for _, uv in observations])
    centers = np.array([c.center for c in cams])
    if np.linalg.matrix_rank(centers - centers.mean(0), tol=1e-9) == 0:
        raise GeometryError("degenerate configuration: camera centers coincide")
    Ps = np.array([c.P for c in cams])
    X = _dlt(Ps, uvs)
    res = _residuals(cams, uvs, X)
    return Triangulation(X, res, np.arange(len(cams)))


def triangulate(observations: Sequence[tuple[CameraModel, np.ndarray]]) -> np.ndarray:
    """Linear least-squares (DLT) point from three or more views."""
    return triangulate_with_residuals(observations).point


def triangulate_ransac(
    observations: Sequence[tuple[CameraModel, np.ndarray]],
    inlier_threshold: float = 2.0,
    max_iterations: int = 100,
    seed: int = 0,
) -> Triangulation:
    """RANSAC over minimal 3-view samples, refit on the largest consensus set.

    When the all-view fit is already consistent the sampling loop is skipped.
    """
    n = len(observations)
    if n < 3:
        raise GeometryError("insufficient views: at least 3 observations required")
    cams = [c for c, _ in observations]
    uvs = np.array([np.asarray(uv, dtype=float) for _, uv in observations])
    Ps = np.array([c.P for c in cams])

    try:
        X = _dlt(Ps, uvs)
        res = _residuals(cams, uvs, X)
        if np.all(res <= inlier_threshold):
            return Triangulation(X, res, np.arange(n))
    except GeometryError:
        pass

    rng = np.random.default_rng(seed)
    all_triples = None
    if n <= 8:
        from itertools import combinations

        all_triples = list(combinations(range(n), 3))
    best: np.ndarray | None = None
    best_err = np.inf
    iters = len(all_triples) if all_triples is not None else max_iterations
    for it in range(iters):
        idx = np.array(all_triples[it]) if all_triples is not None else rng.choice(n, 3, replace=False)
        try:
            Xs = _dlt(Ps[idx], uvs[idx])
        except GeometryError:
            continue
        res = _residuals(cams, uvs, Xs)
        inl = np.flatnonzero(res <= inlier_threshold)
        err = float(np.sum(np.minimum(res, inlier_threshold)))
        if best is None or len(inl) > len(best) or (len(inl) == len(best) and err < best_err):
            best, best_err = inl, err
    if best is None or len(best) < 3:
        raise GeometryError("no consensus: fewer than 3 mutually consistent views")
    X = _dlt(Ps[best], uvs[best])
    res = _residuals(cams, uvs, X)
    inl = np.flatnonzero(res <= inlier_threshold)
    if len(inl) < 3:
        raise GeometryError("no consensus: fewer than 3 mutually consistent views")
    if len(inl) != len(best) or np.any(inl != best):
        X = _dlt(Ps[inl], uvs[inl])
        res = _residuals(cams, uvs, X)
    return Triangulation(X, res, inl)


def kabsch_align(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``source`` onto ``target`` (rows matched)."""
    P = np.asarray(source, dtype=float)
    Q = np.asarray(target, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise GeometryError("degenerate point set: shapes must be matching Nx3")
    if len(P) < 3:
        raise GeometryError("degenerate point set: need at least 3 points")
    pc, qc = P.mean(0), Q.mean(0)
    H = (P - pc).T @ (Q - qc)
    sv = np.linalg.svd(P - pc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise GeometryError("degenerate point set: points are collinear")
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, qc - R @ pc)


def alignment_residuals(source: np.ndarray, target: np.ndarray, transform: RigidTransform) -> np.ndarray:
    return np.linalg.norm(transform.apply(source) - np.asarray(target, dtype=float), axis=1)


def rot6d_to_matrix(r: Sequence[float]) -> np.ndarray:
    """Gram-Schmidt map from the 6D representation to SO(3)."""
    r = np.asarray(r, dtype=float).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise GeometryError("degenerate 6D rotation: first vector is zero")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-12 * max(1.0, np.linalg.norm(a2)):
        raise GeometryError("degenerate 6D rotation: vectors are parallel")
    b2 = u2 / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def coplanarity_score(points: np.ndarray, normalize: bool = True) -> float:
    """Smallest singular value of the centred 3xN point matrix.

    With ``normalize`` the value is divided by sqrt(N), which turns it into
    the RMS out-of-plane distance of the best-fit plane.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or len(P) < 4:
        raise GeometryError("too few points: coplanarity needs at least 4")
    s = np.linalg.svd((P - P.mean(0)).T, compute_uv=False)
    score = float(s[-1])
    return score / np.sqrt(len(P)) if normalize else score

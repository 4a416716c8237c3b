"""Motion-quality and reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .geometry import RigidTransform

MSNR_FLOOR = 1e-12


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# smoothness


@dataclass(frozen=True)
class MSNR:
    db: float
    capped: bool  # residual power hit the floor; db is then a lower bound


def msnr_db(smooth_power: float, residual_power: float) -> MSNR:
    capped = residual_power < MSNR_FLOOR
    return MSNR(float(10.0 * np.log10(smooth_power / max(residual_power, MSNR_FLOOR))), bool(capped))


def smooth3(v: np.ndarray) -> np.ndarray:
    """Three-tap moving average along axis 0; ends padded by odd (point) reflection."""
    v = np.asarray(v, dtype=float)
    head = 2 * v[:1] - v[1:2]
    tail = 2 * v[-1:] - v[-2:-1]
    p = np.concatenate([head, v, tail], axis=0)
    return (p[:-2] + p[1:-1] + p[2:]) / 3.0


def msnr(v: np.ndarray) -> MSNR:
    """Motion signal-to-noise ratio of a velocity series (time on axis 0), in dB."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] < 3:
        raise MetricError("msnr needs at least 3 samples")
    vs = smooth3(v)
    return msnr_db(float(np.mean(vs**2)), float(np.mean((v - vs) ** 2)))


def velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """Central-difference velocities (one-sided at the ends)."""
    return np.gradient(np.asarray(positions, dtype=float), dt, axis=0)


def jerk(positions: np.ndarray, dt: float) -> float:
    """Mean magnitude of the third finite difference divided by dt^3.

    Uses the four-point stencil centred between samples, exact for cubics.
    The last axis holds coordinates when the array has more than one axis.
    """
    x = np.asarray(positions, dtype=float)
    if x.shape[0] < 4:
        raise MetricError("jerk needs at least 4 samples")
    d3 = (x[3:] - 3 * x[2:-1] + 3 * x[1:-2] - x[:-3]) / dt**3
    mag = np.abs(d3) if x.ndim == 1 else np.linalg.norm(d3, axis=-1)
    return float(mag.mean())


# ---------------------------------------------------------------------------
# diversity / coherence


def diversity_coherence(features: np.ndarray, k: int = 5, seed: int = 0, n_init: int = 20) -> tuple[float, float]:
    """Cluster-based spread and compactness of a pose-feature trajectory.

    These two definitions are this package's own: diversity is the mean
    pairwise distance between k-means centroids divided by the RMS feature
    norm, coherence is one minus the ratio of mean distance-to-own-centroid
    to mean distance-to-global-mean, clipped to [0, 1]. Rows are sorted
    before clustering so the result does not depend on frame order.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or len(X) < k:
        raise MetricError(f"need at least k={k} frames of 2-D features")
    X = X[np.lexsort(X.T[::-1])]
    spread = np.linalg.norm(X - X.mean(axis=0), axis=1)
    if spread.max() == 0:
        return 0.0, 1.0
    n_distinct = len(np.unique(X, axis=0))
    km = KMeans(n_clusters=min(k, n_distinct), n_init=n_init, random_state=seed).fit(X)
    C = km.cluster_centers_
    iu = np.triu_indices(len(C), 1)
    pair = np.linalg.norm(C[:, None] - C[None], axis=-1)[iu]
    rms = float(np.sqrt(np.mean(np.sum(X**2, axis=1))))
    diversity = float(pair.mean() / rms) if len(pair) else 0.0
    within = np.linalg.norm(X - C[km.labels_], axis=1).mean()
    coherence = float(np.clip(1.0 - within / spread.mean(), 0.0, 1.0))
    return diversity, coherence


def pose_features(phi: np.ndarray, hand_root: Sequence[RigidTransform] | None = None, objects: Sequence[RigidTransform] | None = None) -> np.ndarray:
    """Per-frame features: joint angles plus the object pose in the hand-root frame."""
    phi = np.asarray(phi, dtype=float)
    if hand_root is None or objects is None:
        return phi
    rel = []
    for h, o in zip(hand_root, objects):
        r = h.inverse().compose(o)
        rel.append(np.concatenate([r.rotation[:, :2].T.ravel(), r.translation]))
    return np.hstack([phi, np.array(rel)])


# ---------------------------------------------------------------------------
# penetration and reconstruction error


def penetration_depth(points: np.ndarray, sdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """max(0, -min signed distance) over the points (signed distance negative inside)."""
    d = sdf(np.atleast_2d(points))
    return float(max(0.0, -float(np.min(d))))


@dataclass(frozen=True)
class PenetrationStats:
    mean: float
    std: float
    per_frame: tuple[float, ...]


def penetration(
    hand_vertices: Sequence[np.ndarray],
    sdf: Callable[[np.ndarray], np.ndarray],
    object_poses: Sequence[RigidTransform | None] | None = None,
) -> PenetrationStats:
    """Per-frame maximum depth of hand vertices inside the object, with mean and std over frames.

    ``sdf`` is expressed in the object frame; hand vertices are mapped into it
    through the inverse object pose when poses are given. Frames without an
    object pose are skipped.
    """
    depths = []
    for k, V in enumerate(hand_vertices):
        if object_poses is not None:
            pose = object_poses[k]
            if pose is None:
                continue
            V = pose.inverse().apply(V)
        depths.append(penetration_depth(V, sdf))
    if not depths:
        raise MetricError("no frames with both hand and object")
    d = np.array(depths)
    return PenetrationStats(float(d.mean()), float(d.std()), tuple(d.tolist()))


def mre(predicted: np.ndarray, observed: np.ndarray, visible: np.ndarray | None = None) -> tuple[float, float]:
    """Mean and std of marker distances over visible markers and frames (arrays (..., 3))."""
    P = np.asarray(predicted, dtype=float)
    O = np.asarray(observed, dtype=float)
    d = np.linalg.norm(P - O, axis=-1)
    mask = np.ones(d.shape, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    mask &= np.isfinite(d)
    if not mask.any():
        raise MetricError("no visible markers")
    return float(d[mask].mean()), float(d[mask].std())


def summary(values: Sequence[float]) -> dict:
    x = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if len(x) == 0:
        return {"n": 0}
    return {
        "n": int(len(x)),
        "mean": float(x.mean()),
        "std": float(x.std()),
        "median": float(np.median(x)),
        "p95": float(np.percentile(x, 95)),
        "max": float(x.max()),
    }

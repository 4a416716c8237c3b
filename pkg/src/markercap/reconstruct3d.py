"""Multi-view triangulation of identified corners and temporal cleanup of marker tracks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .geometry import CameraModel, GeometryError, triangulate_ransac
from .marker_model import MarkerID, PatchTemplate


@dataclass
class MarkerObservation:
    position: np.ndarray
    views: int
    reproj: float
    interp: bool = False


Frame3D = dict[MarkerID, MarkerObservation]


def triangulate_frame(
    identified: dict[str, list[tuple[MarkerID, np.ndarray]]],
    cameras: list[CameraModel] | dict[str, CameraModel],
    inlier_threshold: float = 2.0,
    min_views: int = 3,
) -> Frame3D:
    """Group observations by MarkerID and triangulate with RANSAC.

    Markers with fewer than ``min_views`` observations (or without a consensus
    of that size) are omitted.
    """
    cams = cameras if isinstance(cameras, dict) else {c.id: c for c in cameras}
    obs: dict[MarkerID, list[tuple[CameraModel, np.ndarray]]] = {}
    for cid in sorted(identified):
        for mid, uv in identified[cid]:
            obs.setdefault(mid, []).append((cams[cid], np.asarray(uv, dtype=float)))
    out: Frame3D = {}
    for mid in sorted(obs):
        views = obs[mid]
        if len(views) < min_views:
            continue
        try:
            tri = triangulate_ransac(views, inlier_threshold=inlier_threshold)
        except GeometryError:
            continue
        if len(tri.inliers) < min_views:
            continue
        out[mid] = MarkerObservation(tri.point, len(tri.inliers), float(np.mean(tri.residuals[tri.inliers])))
    return out


def patch_cluster_filter(frame: Frame3D, templates: dict[str, PatchTemplate] | list[PatchTemplate], factor: float = 2.0) -> Frame3D:
    """Keep, per patch, the largest single-linkage cluster (cutoff ``factor`` x patch diagonal)."""
    tpl = templates if isinstance(templates, dict) else {t.patch_id: t for t in templates}
    by_patch: dict[str, list[MarkerID]] = {}
    for mid in frame:
        by_patch.setdefault(mid.patch, []).append(mid)
    out: Frame3D = {}
    for patch, mids in sorted(by_patch.items()):
        mids = sorted(mids)
        if len(mids) == 1 or patch not in tpl:
            out.update({m: frame[m] for m in mids})
            continue
        P = np.array([frame[m].position for m in mids])
        labels = fcluster(linkage(P, method="single"), t=factor * tpl[patch].diagonal, criterion="distance")
        best = None
        for lab in np.unique(labels):
            members = [m for m, l in zip(mids, labels) if l == lab]
            err = float(np.mean([frame[m].reproj for m in members]))
            key = (-len(members), err)
            if best is None or key < best[0]:
                best = (key, members)
        out.update({m: frame[m] for m in best[1]})
    return out


@dataclass
class MarkerTrack:
    marker_id: MarkerID
    positions: np.ndarray  # (T, 3), NaN where missing
    views: np.ndarray = field(default=None)  # type: ignore[assignment]
    reproj: np.ndarray = field(default=None)  # type: ignore[assignment]
    interp: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        T = len(self.positions)
        if self.views is None:
            self.views = np.where(self.present, 3, 0)
        if self.reproj is None:
            self.reproj = np.zeros(T)
        if self.interp is None:
            self.interp = np.zeros(T, dtype=bool)

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.positions), axis=1)

    def copy(self) -> "MarkerTrack":
        return MarkerTrack(self.marker_id, self.positions.copy(), self.views.copy(), self.reproj.copy(), self.interp.copy())


def tracks_from_frames(frames: list[Frame3D]) -> dict[MarkerID, MarkerTrack]:
    T = len(frames)
    ids = sorted({m for f in frames for m in f})
    out = {}
    for mid in ids:
        P = np.full((T, 3), np.nan)
        v = np.zeros(T, dtype=int)
        e = np.zeros(T)
        it = np.zeros(T, dtype=bool)
        for k, f in enumerate(frames):
            if mid in f:
                o = f[mid]
                P[k], v[k], e[k], it[k] = o.position, o.views, o.reproj, o.interp
        out[mid] = MarkerTrack(mid, P, v, e, it)
    return out


def frames_from_tracks(tracks: dict[MarkerID, MarkerTrack], n_frames: int) -> list[Frame3D]:
    frames: list[Frame3D] = [{} for _ in range(n_frames)]
    for mid in sorted(tracks):
        tr = tracks[mid]
        for k in np.flatnonzero(tr.present):
            frames[k][mid] = MarkerObservation(tr.positions[k].copy(), int(tr.views[k]), float(tr.reproj[k]), bool(tr.interp[k]))
    return frames


def zscore_filter(track: MarkerTrack, window: int = 11, threshold: float = 3.0) -> MarkerTrack:
    """Mark samples missing when any coordinate's windowed z-score exceeds ``threshold``.

    Statistics use the other present samples in a centred window and the
    population standard deviation. Near the sequence ends the window slides
    inward so it keeps its full length; a truncated window would leave only a
    handful of neighbours, and one spike among them can then flag a clean
    end sample. Windows with
    fewer than 3 other samples skip the test.
    """
    if window < 5 or window % 2 == 0:
        raise ValueError("window must be odd and at least 5")
    out = track.copy()
    P = track.positions
    present = track.present
    T = len(P)
    half = window // 2
    remove = np.zeros(T, dtype=bool)
    for i in np.flatnonzero(present):
        lo = min(max(0, i - half), max(0, T - window))
        hi = min(T, lo + window)
        idx = [j for j in range(lo, hi) if j != i and present[j]]
        if len(idx) < 3:
            continue
        W = P[idx]
        mu = W.mean(axis=0)
        sd = W.std(axis=0)
        dev = np.abs(P[i] - mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, dev / np.where(sd > 0, sd, 1.0), np.where(dev > 0, np.inf, 0.0))
        if np.any(z > threshold):
            remove[i] = True
    out.positions[remove] = np.nan
    out.views[remove] = 0
    out.reproj[remove] = 0.0
    out.interp[remove] = False
    return out


def fill_gaps(track: MarkerTrack) -> MarkerTrack:
    """Linear interpolation of single missing frames from anchors within two frames on each side.

    Anchors are the nearest originally present samples in {i-1, i-2} and
    {i+1, i+2}. Present samples are never altered; filled samples are flagged.
    """
    out = track.copy()
    P = track.positions
    present = track.present
    T = len(P)
    for i in np.flatnonzero(~present):
        left = next((j for j in (i - 1, i - 2) if 0 <= j and present[j]), None)
        right = next((j for j in (i + 1, i + 2) if j < T and present[j]), None)
        if left is None or right is None:
            continue
        w = (i - left) / (right - left)
        out.positions[i] = (1 - w) * P[left] + w * P[right]
        out.views[i] = 0
        out.reproj[i] = 0.0
        out.interp[i] = True
    return out


def cleanup_tracks(
    frames: list[Frame3D],
    templates: list[PatchTemplate],
    window: int = 11,
    threshold: float = 3.0,
    cluster_factor: float = 2.0,
) -> list[Frame3D]:
    """Cluster filter per frame, then z-score filter and gap filling per track."""
    clustered = [patch_cluster_filter(f, templates, cluster_factor) for f in frames]
    tracks = tracks_from_frames(clustered)
    cleaned = {m: fill_gaps(zscore_filter(t, window, threshold)) for m, t in tracks.items()}
    return frames_from_tracks(cleaned, len(frames))

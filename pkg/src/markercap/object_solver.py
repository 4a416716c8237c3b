"""Per-frame 6-DoF pose of rigid objects from their identified markers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, RigidTransform, alignment_residuals, kabsch_align
from .io import write_jsonl
from .marker_model import MarkerID, MarkerLayout
from .mesh import is_watertight

log = logging.getLogger(__name__)


class ObjectSolverError(ValueError):
    pass


def _collinear(points: np.ndarray) -> bool:
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return sv[1] <= 1e-9 * max(sv[0], 1e-300)


@dataclass
class RigidObjectModel:
    """Canonical marker positions (object frame) plus an optional closed surface mesh.

    ``shape`` is a free-form descriptor such as ``{"type": "cuboid", "x": 0.15, ...}``.
    """

    name: str
    markers: dict[MarkerID, np.ndarray]
    vertices: np.ndarray | None = None
    faces: np.ndarray | None = None
    shape: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.markers = {MarkerID(*m): np.asarray(p, dtype=float).reshape(3) for m, p in self.markers.items()}
        if len(self.markers) < 3 or _collinear(np.array(list(self.markers.values()))):
            raise ObjectSolverError(f"object {self.name}: needs at least 3 non-collinear canonical markers")
        if self.faces is not None:
            self.vertices = np.asarray(self.vertices, dtype=float)
            self.faces = np.asarray(self.faces, dtype=int)
            if not is_watertight(self.faces):
                raise ObjectSolverError(f"object {self.name}: mesh is not watertight")

    @classmethod
    def from_layout(cls, name: str, layout: MarkerLayout, vertices=None, faces=None, shape: dict | None = None) -> "RigidObjectModel":
        markers = {m: layout.position(m) for m in layout.ids() if layout.attachment(m) == name}
        return cls(name, markers, vertices, faces, shape or {})

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "shape": self.shape,
            "markers": [{"patch": m.patch, "index": m.index, "p": p.tolist()} for m, p in sorted(self.markers.items())],
        }
        if self.faces is not None:
            d["mesh"] = {"vertices": self.vertices.tolist(), "faces": self.faces.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RigidObjectModel":
        markers = {MarkerID(m["patch"], int(m["index"])): np.array(m["p"]) for m in d["markers"]}
        mesh = d.get("mesh")
        V = np.array(mesh["vertices"]) if mesh else None
        F = np.array(mesh["faces"], dtype=int) if mesh else None
        return cls(d["name"], markers, V, F, d.get("shape", {}))


def solve_rigid_pose(observed: dict[MarkerID, np.ndarray], model: RigidObjectModel) -> tuple[RigidTransform, float]:
    """Kabsch fit of the canonical markers onto the observed ones, matched by ID.

    Returns the object-to-world transform and the mean per-marker distance
    after alignment. Observed IDs unknown to the model are ignored.
    """
    ids = sorted(m for m in observed if m in model.markers)
    unknown = len(observed) - len(ids)
    if unknown:
        log.warning("object %s: ignoring %d markers absent from the model", model.name, unknown)
    if len(ids) < 3:
        raise ObjectSolverError(f"degenerate observation: {len(ids)} matched markers (need 3)")
    src = np.array([model.markers[m] for m in ids])
    dst = np.array([observed[m] for m in ids], dtype=float)
    if _collinear(src):
        raise ObjectSolverError("degenerate observation: matched markers are collinear")
    try:
        T = kabsch_align(src, dst)
    except GeometryError as exc:
        raise ObjectSolverError(f"degenerate observation: {exc}") from exc
    return T, float(alignment_residuals(src, dst, T).mean())


@dataclass
class ObjectFrameResult:
    frame: int
    transform: RigidTransform | None
    residual: float
    n_markers: int
    degenerate: bool = False

    def to_record(self) -> dict:
        rec = {"frame": self.frame, "n_markers": self.n_markers, "residual": self.residual if not self.degenerate else None}
        if self.transform is None:
            rec.update(R=None, t=None, degenerate=True)
        else:
            rec.update(R=self.transform.rotation.ravel().tolist(), t=self.transform.translation.tolist())
        return rec


def marker_fit_residuals(
    frames: list[dict[MarkerID, np.ndarray]], model: RigidObjectModel, first_frame: int = 0
) -> tuple[list[ObjectFrameResult], dict]:
    """Solve every frame; degenerate frames are flagged rather than raised.

    The summary holds mean/std/max of the per-frame residuals over the solved
    frames plus the number of degenerate frames.
    """
    out = []
    for k, obs in enumerate(frames):
        n = sum(m in model.markers for m in obs)
        try:
            T, r = solve_rigid_pose(obs, model)
            out.append(ObjectFrameResult(first_frame + k, T, r, n))
        except ObjectSolverError:
            out.append(ObjectFrameResult(first_frame + k, None, float("nan"), n, True))
    res = np.array([r.residual for r in out if not r.degenerate])
    stats = {
        "mean": float(res.mean()) if len(res) else float("nan"),
        "std": float(res.std()) if len(res) else float("nan"),
        "max": float(res.max()) if len(res) else float("nan"),
        "n_frames": len(out),
        "n_degenerate": sum(r.degenerate for r in out),
    }
    return out, stats


def write_object_track(path, results: list[ObjectFrameResult]) -> int:
    return write_jsonl(path, (r.to_record() for r in results))


def read_object_track(path) -> list[RigidTransform | None]:
    from .io import iter_jsonl

    out = []
    for rec in iter_jsonl(path):
        out.append(None if rec["R"] is None else RigidTransform(np.reshape(rec["R"], (3, 3)), np.array(rec["t"])))
    return out

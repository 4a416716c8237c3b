"""Synthetic capture: camera rig, scripted motion, visibility and a detector simulator.

The detector simulator stands in for the corner/edge/block networks of a real
capture stack. It emits, per (frame, camera), the same information those
networks would: corner candidates with confidences, edge probabilities for
nearby corner pairs and tag/orientation readings for quadrilaterals.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, RigidTransform, project_points, rotation_about_axis
from .hand_model import N_DOF, DOF_NAMES, HandPose, KinematicHand
from .marker_model import MarkerCodebook, MarkerID, MarkerLayout, PatchTemplate, build_codebook
from .mesh import closest_point_on_mesh, face_normals, ray_triangle_hits


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rig


@dataclass
class RigConfig:
    camera_count: int = 13
    width: int = 2048
    height: int = 2448
    frame_rate: float = 20.0
    cage: tuple[float, float, float] = (2.0, 1.0, 2.0)
    focal: float = 3000.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if self.camera_count < 3:
            raise SynthError("camera_count must be at least 3")
        if self.width <= 0 or self.height <= 0 or self.focal <= 0 or self.frame_rate <= 0:
            raise SynthError("rig dimensions, focal length and frame_rate must be positive")


def _cage_sites(cage: tuple[float, float, float]) -> list[np.ndarray]:
    hx, hy, hz = (c / 2 for c in cage)
    sites = [np.array([sx * hx, sy * hy, sz * hz]) for sz in (1, -1) for sy in (1, -1) for sx in (1, -1)]
    sites += [np.array([0.0, sy * hy, sz * hz]) for sz in (1, -1) for sy in (1, -1)]
    sites.append(np.array([0.0, 0.0, hz]))
    # extra sites for larger rigs: face centres, then short-edge midpoints
    sites += [np.array([0.0, 0.0, -hz]), np.array([0.0, hy, 0.0]), np.array([0.0, -hy, 0.0])]
    sites += [np.array([sx * hx, 0.0, 0.0]) for sx in (1, -1)]
    sites += [np.array([sx * hx, 0.0, sz * hz]) for sz in (1, -1) for sx in (1, -1)]
    return sites


def look_at(cid: str, center, target, focal: float, width: int, height: int) -> CameraModel:
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraModel(cid, width, height, focal, focal, width / 2, height / 2, R, -R @ center)


def synth_rig(config: RigConfig | None = None) -> list[CameraModel]:
    """Cameras on the cage corners, long-edge midpoints and top centre, aimed at the target."""
    config = config or RigConfig()
    config.validate()
    sites = _cage_sites(config.cage)
    if config.camera_count > len(sites):
        raise SynthError(f"at most {len(sites)} camera sites are available")
    return [
        look_at(f"cam{k:02d}", sites[k], config.target, config.focal, config.width, config.height)
        for k in range(config.camera_count)
    ]


def edge_length_bound(cameras: list[CameraModel], block_size: float, reach: float, target=(0.0, 0.0, 0.0), margin: float = 1.1) -> float:
    """Upper bound (px) on the image length of a block edge.

    The largest block seen at the smallest depth any marker can reach (every
    marker lies within ``reach`` of ``target``), times a margin for oblique
    edges. Used as the assembly distance threshold when none is configured.
    """
    depth = min(float(np.linalg.norm(c.center - np.asarray(target, float))) for c in cameras) - reach
    if depth <= 0:
        raise SynthError("working volume reaches a camera")
    return margin * block_size * max(max(c.fx, c.fy) for c in cameras) / depth


# ---------------------------------------------------------------------------
# noise model


@dataclass
class DetectionNoiseModel:
    corner_miss_rate: float = 0.184
    false_positives_per_frame: float = 8.0
    localization_sigma: float = 1.0
    edge_error_rate: float = 0.0098
    tag_mislabel_rate: float = 0.02
    edge_temperature: float = 0.3
    edge_query_radius: float = 60.0
    rng_seed: int = 0

    def validate(self) -> None:
        for key in ("corner_miss_rate", "edge_error_rate", "tag_mislabel_rate", "edge_temperature"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{key} must lie in [0, 1], got {v}")
        for key in ("false_positives_per_frame", "localization_sigma", "edge_query_radius"):
            if getattr(self, key) < 0:
                raise SynthError(f"{key} must be non-negative")

    @classmethod
    def zero(cls, seed: int = 0) -> "DetectionNoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.3, 60.0, seed)


# ---------------------------------------------------------------------------
# scripts


@dataclass
class MotionScript:
    """Per-frame ground truth; any of the streams may be absent."""

    frame_rate: float = 20.0
    hand_poses: list[HandPose] = field(default_factory=list)
    object_poses: list[RigidTransform] = field(default_factory=list)
    calibration_frames: int = 0

    @property
    def n_frames(self) -> int:
        return max(len(self.hand_poses), len(self.object_poses))


def _smooth(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def hand_base_transform(center=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Places the canonical hand so its palm centre sits at ``center``."""
    return RigidTransform(np.eye(3), np.asarray(center, float) - np.array([0.08, 0.0, 0.0]))


def calibration_script(n_frames: int, frame_rate: float = 20.0, center=(0.0, 0.0, 0.0)) -> list[HandPose]:
    """Slow rotations of an open hand: about the forearm axis, then a wrist nod."""
    poses = []
    base = hand_base_transform(center)
    pivot = np.array([0.08, 0.0, 0.0])
    for k in range(n_frames):
        s = k / max(n_frames - 1, 1)
        roll = 1.2 * np.sin(2 * np.pi * s)
        pitch = 0.5 * np.sin(4 * np.pi * s)
        yaw = 0.4 * np.sin(2 * np.pi * s + 0.7)
        R = rotation_about_axis([0, 0, 1], yaw) @ rotation_about_axis([0, 1, 0], pitch) @ rotation_about_axis([1, 0, 0], roll)
        t = base.translation + pivot - R @ pivot
        phi = np.zeros(N_DOF)
        phi[[7, 12, 17, 22]] = 0.15 * np.sin(2 * np.pi * s)  # slight finger flexion
        poses.append(HandPose.from_rotation(t, R, phi))
    return poses


def motion_script(
    n_frames: int, hand: KinematicHand, frame_rate: float = 20.0, center=(0.0, 0.0, 0.0), amplitude: float = 0.6, seed: int = 0
) -> list[HandPose]:
    """Scripted flexion, abduction and global rotation, smooth and within limits."""
    rng = np.random.default_rng(seed)
    lo, hi = hand.phi_low, hand.phi_high
    mid = 0.5 * (lo + hi)
    span = 0.5 * (hi - lo)
    freq = rng.uniform(0.15, 0.45, N_DOF)
    phase = rng.uniform(0, 2 * np.pi, N_DOF)
    base = hand_base_transform(center)
    pivot = np.array([0.08, 0.0, 0.0])
    poses = []
    for k in range(n_frames):
        time = k / frame_rate
        ramp = _smooth(np.array(k / 20.0))
        target = mid + amplitude * span * np.sin(2 * np.pi * freq * time + phase)
        phi = np.clip(ramp * target, lo + 1e-6, hi - 1e-6)
        R = rotation_about_axis([1, 0, 0], 0.6 * np.sin(0.3 * time)) @ rotation_about_axis([0, 0, 1], 0.3 * np.sin(0.2 * time))
        t = base.translation + pivot - R @ pivot + 0.03 * np.array([np.sin(0.25 * time), np.sin(0.17 * time), 0.0])
        poses.append(HandPose.from_rotation(t, R, phi))
    return poses


def check_limits(hand: KinematicHand, poses: list[HandPose]) -> None:
    bad = set()
    for p in poses:
        bad.update(np.flatnonzero((p.phi < hand.phi_low) | (p.phi > hand.phi_high)).tolist())
    if bad:
        raise SynthError("script violates joint limits: " + ", ".join(DOF_NAMES[k] for k in sorted(bad)))


# ---------------------------------------------------------------------------
# hand markers


@dataclass
class SurfaceBindings:
    """Marker -> (triangle, barycentric) on a mesh; the generator's ground truth."""

    ids: list[MarkerID]
    tri: np.ndarray
    bary: np.ndarray

    def positions(self, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nkd->nd", self.bary, vertices[faces[self.tri]])

    def normals(self, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        return face_normals(vertices, faces[self.tri])


def ground_truth_bindings(hand: KinematicHand, layout: MarkerLayout, ids: list[MarkerID] | None = None) -> SurfaceBindings:
    """Bind each layout marker to the closest point of its own segment on the canonical mesh."""
    ids = ids or sorted(layout.ids())
    V = hand.rest_vertices()
    J = hand.rest_joints()
    tri = np.empty(len(ids), dtype=np.int64)
    bary = np.empty((len(ids), 3))
    by_seg: dict[str, list[int]] = {}
    for k, mid in enumerate(ids):
        by_seg.setdefault(layout.attachment(mid), []).append(k)
    for seg, ks in by_seg.items():
        j = hand.segment_joint[seg]
        local = np.array([layout.position(ids[k]) for k in ks])
        world = local @ hand.rest_frames[j].T + J[j]
        t, b, _ = closest_point_on_mesh(world, V, hand.faces, hand.segment_triangles[seg])
        tri[ks] = t
        bary[ks] = b
    return SurfaceBindings(ids, tri, bary)


# ---------------------------------------------------------------------------
# visibility


@dataclass
class Occluder:
    """A posed triangle mesh split into groups with bounding spheres for ray pruning."""

    vertices: np.ndarray
    faces: np.ndarray
    groups: list[np.ndarray]

    def __post_init__(self) -> None:
        tri = self.vertices[self.faces]
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]
        self.centers = np.empty((len(self.groups), 3))
        self.radii = np.empty(len(self.groups))
        for g, idx in enumerate(self.groups):
            pts = tri[idx].reshape(-1, 3)
            c = pts.mean(axis=0)
            self.centers[g] = c
            self.radii[g] = np.linalg.norm(pts - c, axis=1).max()


def hand_occluder(hand: KinematicHand, vertices: np.ndarray) -> Occluder:
    palm = np.concatenate([hand.segment_triangles["dorsum"], hand.segment_triangles["palm"]])
    groups = [palm] + [hand.segment_triangles[s] for s in hand.segment_names[2:]]
    return Occluder(vertices, hand.faces, groups)


def occluded(
    origins: np.ndarray,
    targets: np.ndarray,
    occluders: list[Occluder],
    eps: float = 1e-5,
    own_group: np.ndarray | None = None,
) -> np.ndarray:
    """True where the open segment origin->target crosses any occluder triangle.

    ``own_group`` (N, 2) optionally names (occluder, group) pairs holding each
    origin. Groups are convex solids, so a front-facing point is never hidden
    by its own group and that test is skipped.
    """
    d = targets - origins
    length = np.linalg.norm(d, axis=1)
    d = d / length[:, None]
    out = np.zeros(len(origins), dtype=bool)
    for o, occ in enumerate(occluders):
        # distance from each group's sphere centre to each ray segment
        rel = occ.centers[None, :, :] - origins[:, None, :]
        s = np.clip(np.einsum("rgi,ri->rg", rel, d), 0.0, length[:, None])
        dist = np.linalg.norm(rel - s[..., None] * d[:, None, :], axis=-1)
        near = dist <= occ.radii[None, :]
        if own_group is not None:
            mine = own_group[:, 0] == o
            near[np.flatnonzero(mine), own_group[mine, 1]] = False
        for g, tris in enumerate(occ.groups):
            rays = np.flatnonzero(near[:, g] & ~out)
            if len(rays) == 0:
                continue
            t, _ = ray_triangle_hits(
                origins[rays, None, :], d[rays, None, :], occ._a[tris][None], occ._b[tris][None], occ._c[tris][None]
            )
            hit = ((t > eps) & (t < length[rays, None] - eps)).any(axis=1)
            out[rays[hit]] = True
    return out


def visibility(
    cameras: list[CameraModel],
    points: np.ndarray,
    normals: np.ndarray,
    occluders: list[Occluder],
    max_view_angle_deg: float = 80.0,
    own_group: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-camera visibility mask (C, N) and projections (C, N, 2)."""
    C, N = len(cameras), len(points)
    vis = np.zeros((C, N), dtype=bool)
    uv = np.full((C, N, 2), np.nan)
    cos_max = np.cos(np.deg2rad(max_view_angle_deg))
    for c, cam in enumerate(cameras):
        to_cam = cam.center - points
        dist = np.linalg.norm(to_cam, axis=1)
        facing = np.einsum("ni,ni->n", normals, to_cam) / dist >= cos_max
        proj, depth = project_points(cam, points)
        ok = facing & (depth > 0)
        ok[ok] &= cam.in_image(proj[ok])
        idx = np.flatnonzero(ok)
        if len(idx):
            og = None if own_group is None else own_group[idx]
            blocked = occluded(points[idx], np.broadcast_to(cam.center, (len(idx), 3)), occluders, own_group=og)
            ok[idx[blocked]] = False
        vis[c] = ok
        uv[c] = proj
    return vis, uv


# ---------------------------------------------------------------------------
# detection simulator


def signed_area(quad: np.ndarray) -> float:
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def quad_shape_ok(quad: np.ndarray, max_ratio: float = 3.0, min_angle_deg: float = 20.0) -> bool:
    """Convex, side ratio and interior-angle tests for a cyclically ordered quadrilateral."""
    sides = np.roll(quad, -1, axis=0) - quad
    lens = np.linalg.norm(sides, axis=1)
    if lens.min() <= 0 or lens.max() / lens.min() > max_ratio:
        return False
    cross = sides[:, 0] * np.roll(sides, -1, axis=0)[:, 1] - sides[:, 1] * np.roll(sides, -1, axis=0)[:, 0]
    if not (np.all(cross > 0) or np.all(cross < 0)):
        return False
    cos_min = np.cos(np.deg2rad(180.0 - min_angle_deg))
    for k in range(4):
        u = -sides[k - 1]
        v = sides[k]
        c = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        if c > np.cos(np.deg2rad(min_angle_deg)) or c < cos_min:
            return False
    return True


def canonical_cycle(idx: list[int] | tuple[int, ...], uv: np.ndarray) -> tuple[int, ...]:
    """Rotate/reflect a 4-cycle so it starts at its lowest index and has positive area."""
    idx = list(idx)
    if signed_area(uv[idx]) < 0:
        idx = idx[::-1]
    k = int(np.argmin(idx))
    return tuple(idx[k:] + idx[:k])


@dataclass
class BlockReading:
    corner_idx: tuple[int, int, int, int]
    tag: str
    orient: int
    conf: float


@dataclass
class DetectionFrame:
    frame: int
    camera: str
    corners: np.ndarray  # (N, 2)
    conf: np.ndarray  # (N,)
    edge_pairs: dict[tuple[int, int], float]
    blocks: dict[frozenset, BlockReading]
    garbage_seed: int = 0
    truth: list[MarkerID | None] = field(default_factory=list)

    def edge_probability(self, i: int, j: int) -> float:
        return self.edge_pairs.get((min(i, j), max(i, j)), 0.0)

    def classify_block(self, corners: tuple[int, ...], codebook: MarkerCodebook | None = None) -> BlockReading:
        """Tag reading for a quadrilateral; non-blocks read as deterministic garbage."""
        key = frozenset(corners)
        if key in self.blocks:
            return self.blocks[key]
        codebook = codebook or build_codebook()
        h = hashlib.sha256(f"{self.garbage_seed}:{sorted(key)}".encode()).digest()
        tag = codebook.tag(int.from_bytes(h[:4], "big") % codebook.capacity)
        return BlockReading(tuple(corners), tag, 90 * (h[4] % 4), 0.5 + h[5] / 512)

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "camera": self.camera,
            "corners": [{"u": float(u), "v": float(v), "conf": float(c)} for (u, v), c in zip(self.corners, self.conf)],
            "edge_oracle": {"pairs": [[int(i), int(j), float(p)] for (i, j), p in sorted(self.edge_pairs.items())]},
            "block_oracle": [
                {"corner_idx": [int(i) for i in b.corner_idx], "tag": b.tag, "orient": int(b.orient), "conf": float(b.conf)}
                for b in sorted(self.blocks.values(), key=lambda b: b.corner_idx)
            ],
            "garbage_seed": int(self.garbage_seed),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DetectionFrame":
        corners = np.array([[c["u"], c["v"]] for c in rec["corners"]], dtype=float).reshape(-1, 2)
        conf = np.array([c["conf"] for c in rec["corners"]], dtype=float)
        pairs = {(int(i), int(j)): float(p) for i, j, p in rec["edge_oracle"]["pairs"]}
        blocks = {}
        for b in rec["block_oracle"]:
            r = BlockReading(tuple(b["corner_idx"]), b["tag"], int(b["orient"]), float(b["conf"]))
            blocks[frozenset(r.corner_idx)] = r
        return cls(int(rec["frame"]), rec["camera"], corners, conf, pairs, blocks, int(rec.get("garbage_seed", 0)))


def _lattice_edges(templates: list[PatchTemplate]) -> set[frozenset]:
    edges = set()
    for t in templates:
        for cell in t.blocks:
            ids = t.corner_ids(cell)
            for k in range(4):
                edges.add(frozenset((ids[k], ids[(k + 1) % 4])))
    return edges


class DetectionSimulator:
    """Turns visible marker projections into detector-like records."""

    def __init__(self, templates: list[PatchTemplate], noise: DetectionNoiseModel, codebook: MarkerCodebook | None = None):
        noise.validate()
        self.templates = templates
        self.noise = noise
        self.codebook = codebook or build_codebook()
        self.edges = _lattice_edges(templates)
        self.blocks = []  # (template corner ids, tag code, printed orientation)
        for t in templates:
            for cell, tag in t.blocks.items():
                self.blocks.append((t.corner_ids(cell), tag.code, tag.orientation))

    def render(
        self, frame: int, cam_index: int, camera: CameraModel, ids: list[MarkerID], uv: np.ndarray, visible: np.ndarray
    ) -> DetectionFrame:
        nz = self.noise
        rng = np.random.default_rng([nz.rng_seed, frame, cam_index])
        vis_idx = np.flatnonzero(visible)
        keep = rng.random(len(vis_idx)) >= nz.corner_miss_rate
        vis_idx = vis_idx[keep]
        sigma = nz.localization_sigma
        noise = np.zeros((len(vis_idx), 2))
        conf = np.ones(len(vis_idx))
        if sigma > 0:
            noise = rng.normal(0.0, sigma, (len(vis_idx), 2))
            norm = np.linalg.norm(noise, axis=1, keepdims=True)
            noise *= np.minimum(1.0, 4 * sigma / np.maximum(norm, 1e-300))
            conf = 1.0 - 0.3 * rng.random(len(vis_idx))
        pts = uv[vis_idx] + noise
        n_fp = rng.poisson(nz.false_positives_per_frame) if nz.false_positives_per_frame > 0 else 0
        fp = rng.uniform([0, 0], [camera.width, camera.height], (n_fp, 2))
        fp_conf = rng.uniform(0.6, 1.0, n_fp)
        all_pts = np.vstack([pts, fp]) if n_fp else pts
        all_conf = np.concatenate([conf, fp_conf])
        truth: list[MarkerID | None] = [ids[i] for i in vis_idx] + [None] * n_fp
        order = rng.permutation(len(all_pts))
        all_pts, all_conf = all_pts[order], all_conf[order]
        truth = [truth[k] for k in order]
        where = {mid: k for k, mid in enumerate(truth) if mid is not None}

        # edge probabilities for nearby pairs
        from scipy.spatial import cKDTree

        pairs: dict[tuple[int, int], float] = {}
        if len(all_pts) > 1:
            tree = cKDTree(all_pts)
            cand = sorted(tree.query_pairs(nz.edge_query_radius))
            if cand:
                cand = np.array(cand)
                labels = np.array(
                    [
                        truth[i] is not None and truth[j] is not None and frozenset((truth[i], truth[j])) in self.edges
                        for i, j in cand
                    ]
                )
                flip = rng.random(len(cand)) < nz.edge_error_rate
                labels = labels ^ flip
                u = rng.random(len(cand))
                p = 0.5 + (labels - 0.5) * (1.0 - nz.edge_temperature * u)
                for (i, j), pv in zip(cand, p):
                    if pv >= 0.5:
                        pairs[(int(i), int(j))] = float(pv)

        # block readings for ground-truth visible blocks
        blocks: dict[frozenset, BlockReading] = {}
        for corner_ids, code, printed in self.blocks:
            if not all(c in where for c in corner_ids):
                continue
            idx = [where[c] for c in corner_ids]
            quad = all_pts[idx]
            if signed_area(quad) <= 0 or not quad_shape_ok(quad):
                continue
            canon = canonical_cycle(idx, all_pts)
            pos_q0 = canon.index(idx[0])
            orient = 90 * ((pos_q0 + printed // 90) % 4)
            tag = code
            if nz.tag_mislabel_rate > 0 and rng.random() < nz.tag_mislabel_rate:
                k = self.codebook.index(code)
                tag = self.codebook.tag((k + 1 + rng.integers(self.codebook.capacity - 1)) % self.codebook.capacity)
            bconf = 1.0 if nz.tag_mislabel_rate == 0 else float(rng.uniform(0.7, 1.0))
            blocks[frozenset(idx)] = BlockReading(canon, tag, orient, bconf)
        gseed = int(rng.integers(2**31))
        return DetectionFrame(frame, camera.id, all_pts, all_conf, pairs, blocks, gseed, truth)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneFrame:
    """Ground truth for one frame."""

    frame: int
    hand_pose: HandPose | None
    object_pose: RigidTransform | None
    marker_ids: list[MarkerID]
    marker_positions: np.ndarray
    visible_views: np.ndarray  # (C, N) bool
    uv: np.ndarray  # (C, N, 2)

    def view_counts(self) -> np.ndarray:
        return self.visible_views.sum(axis=0)


@dataclass
class ObjectSpec:
    name: str
    vertices: np.ndarray  # object-frame mesh
    faces: np.ndarray
    layout: MarkerLayout
    templates: list[PatchTemplate]
    normals: dict[MarkerID, np.ndarray]


def box_object(name: str, size=(0.15, 0.04, 0.04), grid=(2, 4), block_size=0.008, tag_start: int = 0) -> ObjectSpec:
    from .marker_model import build_box_layout
    from .mesh import box_mesh

    templates, layout, _ = build_box_layout(name, size, grid, block_size, tag_start=tag_start)
    V, F = box_mesh(size, cell=0.01)
    normals = {}
    half = np.asarray(size) / 2
    for mid in layout.ids():
        p = layout.position(mid)
        axis = int(np.argmax(np.abs(p) / half))
        n = np.zeros(3)
        n[axis] = np.sign(p[axis])
        normals[mid] = n
    return ObjectSpec(name, V, F, layout, templates, normals)


class SceneRenderer:
    """Computes per-frame ground truth markers and visibility for a hand (+ optional object)."""

    def __init__(
        self,
        hand: KinematicHand,
        hand_layout: MarkerLayout,
        cameras: list[CameraModel],
        beta: np.ndarray | None = None,
        obj: ObjectSpec | None = None,
        max_view_angle_deg: float = 80.0,
    ):
        self.hand = hand
        self.cameras = cameras
        self.beta = np.zeros(10) if beta is None else np.asarray(beta, float)
        self.bindings = ground_truth_bindings(hand, hand_layout)
        seg_of_face = hand.face_segment[self.bindings.tri]
        self._hand_groups = np.maximum(seg_of_face - 1, 0)  # dorsum and palm share the palm-box group
        self.obj = obj
        self.max_view_angle_deg = max_view_angle_deg
        self.obj_ids = sorted(obj.layout.ids()) if obj else []
        if obj:
            self._obj_local = np.array([obj.layout.position(m) for m in self.obj_ids])
            self._obj_normals = np.array([obj.normals[m] for m in self.obj_ids])
            self._obj_groups = _spatial_groups(obj.vertices, obj.faces)

    @property
    def marker_ids(self) -> list[MarkerID]:
        return list(self.bindings.ids) + list(self.obj_ids)

    def frame(self, k: int, hand_pose: HandPose | None, object_pose: RigidTransform | None) -> SceneFrame:
        pts, nrm, occ, own = [], [], [], []
        ids: list[MarkerID] = []
        if hand_pose is not None:
            V = self.hand.posed_vertices(hand_pose, self.beta)
            pts.append(self.bindings.positions(V, self.hand.faces))
            nrm.append(self.bindings.normals(V, self.hand.faces))
            own.append(np.stack([np.full(len(self.bindings.ids), len(occ)), self._hand_groups], axis=1))
            occ.append(hand_occluder(self.hand, V))
            ids += self.bindings.ids
        if object_pose is not None and self.obj is not None:
            pts.append(object_pose.apply(self._obj_local))
            nrm.append(self._obj_normals @ object_pose.rotation.T)
            own.append(np.stack([np.full(len(self.obj_ids), -1), np.zeros(len(self.obj_ids), int)], axis=1))
            occ.append(Occluder(object_pose.apply(self.obj.vertices), self.obj.faces, self._obj_groups))
            ids += self.obj_ids
        P = np.vstack(pts) if pts else np.zeros((0, 3))
        Nn = np.vstack(nrm) if nrm else np.zeros((0, 3))
        og = np.vstack(own) if own else None
        vis, uv = visibility(self.cameras, P, Nn, occ, self.max_view_angle_deg, og)
        return SceneFrame(k, hand_pose, object_pose, ids, P, vis, uv)


def _spatial_groups(V: np.ndarray, F: np.ndarray, n: int = 6) -> list[np.ndarray]:
    """Split a mesh into ``n`` slabs along its longest axis for ray pruning."""
    c = V[F].mean(axis=1)
    axis = int(np.argmax(np.ptp(V, axis=0)))
    edges = np.linspace(c[:, axis].min(), c[:, axis].max() + 1e-12, n + 1)
    bins = np.clip(np.searchsorted(edges, c[:, axis], side="right") - 1, 0, n - 1)
    return [np.flatnonzero(bins == b) for b in range(n) if np.any(bins == b)]


def object_script_following(hand_poses: list[HandPose], offset: RigidTransform | None = None) -> list[RigidTransform]:
    """Object rigidly carried under the palm (hand root frame offset)."""
    offset = offset or RigidTransform(np.eye(3), np.array([0.05, 0.0, -0.040]))
    out = []
    for p in hand_poses:
        root = RigidTransform(p.rotation, p.t)
        out.append(root.compose(offset))
    return out


# ---------------------------------------------------------------------------
# cube sequences


@dataclass
class CubeSequence:
    track: np.ndarray  # (T, 384, 3), placeholder rows for occluded markers
    poses: list[RigidTransform]
    moves: list[tuple[int, str, int]]  # (frame the turn completes, face, dir)


def tumbling_pose(frame: int, frame_rate: float = 20.0) -> RigidTransform:
    """Smooth whole-cube rotation and drift used for rest/tumble fixtures."""
    t = frame / frame_rate
    R = rotation_about_axis([0.3, 1.0, 0.2], 1.1 * np.sin(0.4 * t)) @ rotation_about_axis([1.0, 0.0, 0.4], 0.8 * t)
    return RigidTransform(R, np.array([0.1 * np.sin(0.3 * t), 0.05 * np.cos(0.2 * t), 0.02 * t]))


def cube_marker_track(
    moves: list[tuple[str, int]],
    frames_per_turn: int = 30,
    rest_frames: int = 10,
    pose_fn=None,
    occlusion: float = 0.0,
    noise: float = 0.0,
    seed: int = 0,
    model=None,
) -> CubeSequence:
    """Render a cube performing ``moves`` (face, dir) with eased turns between rests.

    The turning half is selected geometrically (markers on the face's side of
    the centre plane) and rotated about the face normal, so the generator
    shares no bookkeeping with the reconstruction.
    """
    from .rubik import FACE_NORMALS, PLACEHOLDER, CubeModel, canonical_marker_positions, quarter_turn

    model = model or CubeModel()
    pose_fn = pose_fn or (lambda f: RigidTransform(rotation_about_axis([1, 1, 0], 0.4), np.array([0.0, 0.0, 0.1])))
    rng = np.random.default_rng(seed)
    X = canonical_marker_positions(model)[0]
    frames: list[np.ndarray] = []
    poses: list[RigidTransform] = []
    gt: list[tuple[int, str, int]] = []

    def emit(Xc: np.ndarray) -> None:
        pose = pose_fn(len(frames))
        P = pose.apply(Xc)
        if noise:
            P = P + rng.normal(0.0, noise, P.shape)
        if occlusion:
            P[rng.random(len(P)) < occlusion] = PLACEHOLDER
        frames.append(P)
        poses.append(pose)

    for _ in range(rest_frames):
        emit(X)
    for face, direction in moves:
        n = FACE_NORMALS[face]
        sel = X @ n > 0
        for k in range(1, frames_per_turn + 1):
            ang = direction * 0.5 * np.pi * _smooth(np.array(k / frames_per_turn))
            Xc = X.copy()
            Xc[sel] = X[sel] @ rotation_about_axis(n, float(ang)).T
            emit(Xc)
        X = X.copy()
        X[sel] = X[sel] @ quarter_turn(face, direction).T
        gt.append((len(frames) - 1, face, direction))
        for _ in range(rest_frames):
            emit(X)
    return CubeSequence(np.array(frames), poses, gt)

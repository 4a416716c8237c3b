"""Procedural articulated hand: kinematic tree, 27-DoF pose map, capsule mesh, skinning.

Coordinates of the canonical right hand: wrist at the origin, fingers along +x,
back of the hand towards +z, thumb on the +y side. Every joint carries a rest
frame whose x axis runs along the bone, y is the flexion axis (positive angles
curl towards the palm) and z points dorsally.

The pose of a joint is ``R = Rx(twist) @ Rz(abduction) @ Ry(flexion)`` in that
joint's rest frame. Shape parameters act through a fixed linear basis on bone
lengths, radii and palm extent, so rest joints and rest vertices are smooth
functions of ``beta`` and every quantity below is differentiable with jax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from ._jax import jax, jnp
from .geometry import matrix_to_rot6d, rot6d_to_matrix
from .mesh import closest_point_on_mesh, closest_point_on_triangles, face_normals

FINGERS = ("thumb", "index", "middle", "ring", "little")
PHALANGES = ("proximal", "middle", "distal")
JOINT_KINDS = ("mcp", "pip", "dip")

JOINT_NAMES = ("wrist",) + tuple(f"{f}_{k}" for f in FINGERS for k in JOINT_KINDS)
SEGMENT_NAMES = ("dorsum", "palm") + tuple(f"{f}_{p}" for f in FINGERS for p in PHALANGES)
N_DOF = 27
N_BETA = 10

AXIS_FLEX, AXIS_ABD, AXIS_TWIST = 1, 2, 0  # local y, z, x


def _build_dof_map() -> list[tuple[str, int]]:
    out = []
    for f in FINGERS:
        if f == "thumb":
            out += [("thumb_mcp", AXIS_FLEX), ("thumb_mcp", AXIS_ABD), ("thumb_mcp", AXIS_TWIST)]
            out += [("thumb_pip", AXIS_FLEX), ("thumb_pip", AXIS_ABD), ("thumb_pip", AXIS_TWIST)]
            out += [("thumb_dip", AXIS_FLEX)]
        else:
            out += [(f"{f}_mcp", AXIS_FLEX), (f"{f}_mcp", AXIS_ABD), (f"{f}_mcp", AXIS_TWIST)]
            out += [(f"{f}_pip", AXIS_FLEX), (f"{f}_dip", AXIS_FLEX)]
    return out


DOF_MAP = tuple(_build_dof_map())
DOF_NAMES = tuple(f"{j}_{('twist', 'flex', 'abd')[a]}" for j, a in DOF_MAP)


def _default_limits() -> tuple[np.ndarray, np.ndarray]:
    lo = np.empty(N_DOF)
    hi = np.empty(N_DOF)
    for k, (joint, axis) in enumerate(DOF_MAP):
        finger, kind = joint.split("_")
        if finger == "thumb":
            if kind == "dip":
                lo[k], hi[k] = -0.1, 1.4
            else:
                lo[k], hi[k] = -0.8, (1.6 if axis == AXIS_FLEX else 0.8)
        elif kind == "mcp":
            lo[k], hi[k] = {AXIS_FLEX: (-0.5, 1.7), AXIS_ABD: (-0.35, 0.35), AXIS_TWIST: (-0.2, 0.2)}[axis]
        elif kind == "pip":
            lo[k], hi[k] = -0.1, 1.9
        else:
            lo[k], hi[k] = -0.1, 1.6
    return lo, hi


# anthropometric defaults (metres)
BONE_LENGTHS = {
    "thumb": (0.044, 0.032, 0.026),
    "index": (0.040, 0.024, 0.019),
    "middle": (0.045, 0.028, 0.020),
    "ring": (0.042, 0.027, 0.020),
    "little": (0.034, 0.020, 0.018),
}
BONE_RADII = {
    "thumb": (0.0105, 0.0095, 0.0085),
    "index": (0.0095, 0.0086, 0.0078),
    "middle": (0.0096, 0.0088, 0.0080),
    "ring": (0.0090, 0.0083, 0.0075),
    "little": (0.0082, 0.0074, 0.0068),
}
MCP_POSITIONS = {
    "thumb": (0.015, 0.040, -0.004),
    "index": (0.095, 0.031, 0.0),
    "middle": (0.097, 0.010, 0.0),
    "ring": (0.094, -0.011, 0.0),
    "little": (0.090, -0.031, 0.0),
}
FINGER_DIRECTIONS = {
    "thumb": (0.5, 0.8, -0.3),
    "index": (np.cos(0.10), np.sin(0.10), 0.0),
    "middle": (1.0, 0.0, 0.0),
    "ring": (np.cos(-0.10), np.sin(-0.10), 0.0),
    "little": (np.cos(-0.20), np.sin(-0.20), 0.0),
}
PALM_LO = (-0.010, -0.042, -0.014)
PALM_HI = (0.090, 0.040, 0.014)

# shape basis: relative change per unit of beta
SCALE_PER_UNIT = 0.03
LENGTH_PER_UNIT = 0.04
RADIUS_PER_UNIT = 0.05
PALM_PER_UNIT = 0.04

CAPSULE_AROUND = 12
CAPSULE_AXIAL = (0.0, 0.25, 0.5, 0.75, 1.0)
CAPSULE_CAP = (np.pi / 6, np.pi / 3)
# knuckle-side caps are flattened so a wider parent does not swallow its child's surface
JOINT_CAP_SCALE = 0.2


def _frame_from_direction(direction, dorsal_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    x = np.asarray(direction, dtype=float)
    x = x / np.linalg.norm(x)
    z = np.asarray(dorsal_hint, dtype=float)
    z = z - x * (z @ x)
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass
class HandShapeParams:
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETA))

    def __post_init__(self) -> None:
        self.beta = np.asarray(self.beta, dtype=float).reshape(N_BETA)
        if np.any(np.abs(self.beta) > 3.0 + 1e-12):
            raise ValueError("shape parameters must lie in [-3, 3]")


@dataclass
class HandPose:
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    o6: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.o6 = np.asarray(self.o6, dtype=float).reshape(6)
        self.phi = np.asarray(self.phi, dtype=float).reshape(N_DOF)
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("pose contains non-finite DoFs")

    @classmethod
    def from_rotation(cls, t, R, phi=None) -> "HandPose":
        return cls(np.asarray(t, float), matrix_to_rot6d(np.asarray(R, float)), np.zeros(N_DOF) if phi is None else phi)

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.o6)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.o6, self.phi])

    @classmethod
    def from_vector(cls, x) -> "HandPose":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:9], x[9:36])

    def copy(self) -> "HandPose":
        return HandPose(self.t.copy(), self.o6.copy(), self.phi.copy())


# ---------------------------------------------------------------------------
# differentiable kernels (jax)


def _axis_rot(axis: int, angle):
    c, s = jnp.cos(angle), jnp.sin(angle)
    one, zero = jnp.ones_like(angle), jnp.zeros_like(angle)
    if axis == 0:
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == 1:
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return jnp.stack([jnp.stack(r, axis=-1) for r in rows], axis=-2)


def expand_dofs(phi) -> jnp.ndarray:
    """27 reduced DoFs -> (15, 3) per-joint (twist, flexion, abduction) angles."""
    full = jnp.zeros((15, 3), dtype=jnp.result_type(phi, jnp.float64))
    for k, (joint, axis) in enumerate(DOF_MAP):
        full = full.at[JOINT_NAMES.index(joint) - 1, axis].set(phi[k])
    return full


def dof_to_joint_rotations(phi) -> jnp.ndarray:
    """Map the reduced pose vector to 15 joint rotation matrices (Rx @ Rz @ Ry)."""
    full = expand_dofs(jnp.asarray(phi))
    return _axis_rot(0, full[:, 0]) @ _axis_rot(2, full[:, 2]) @ _axis_rot(1, full[:, 1])


def _rot6d(o6):
    a1, a2 = o6[:3], o6[3:]
    b1 = a1 / jnp.linalg.norm(a1)
    u2 = a2 - jnp.dot(b1, a2) * b1
    b2 = u2 / jnp.linalg.norm(u2)
    return jnp.stack([b1, b2, jnp.cross(b1, b2)], axis=1)


class KinematicHand:
    """Immutable procedural hand model.

    Args:
        limits: optional ``(phi_low, phi_high)`` override.
    """

    def __init__(self, limits: tuple[np.ndarray, np.ndarray] | None = None):
        lo, hi = _default_limits() if limits is None else (np.asarray(limits[0], float), np.asarray(limits[1], float))
        if lo.shape != (N_DOF,) or hi.shape != (N_DOF,) or np.any(lo >= hi) or np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("joint limits must satisfy low < 0 < high componentwise")
        self.phi_low, self.phi_high = lo, hi
        self.joint_names = JOINT_NAMES
        self.segment_names = SEGMENT_NAMES
        self.dof_map = DOF_MAP
        self.parents = np.array([-1] + [0 if k.endswith("mcp") else JOINT_NAMES.index(k) - 1 for k in JOINT_NAMES[1:]])
        self.segment_joint = {"dorsum": 0, "palm": 0}
        for f in FINGERS:
            for p, kind in zip(PHALANGES, JOINT_KINDS):
                self.segment_joint[f"{f}_{p}"] = JOINT_NAMES.index(f"{f}_{kind}")
        self.segment_joint_array = np.array([self.segment_joint[s] for s in SEGMENT_NAMES])
        frames = [np.eye(3)]
        for j in JOINT_NAMES[1:]:
            f = j.split("_")[0]
            hint = (0.0, -0.45, 1.0) if f == "thumb" else (0.0, 0.0, 1.0)
            frames.append(_frame_from_direction(FINGER_DIRECTIONS[f], hint))
        self.rest_frames = np.stack(frames)
        self._jit_rest = jax.jit(self._rest_geometry)
        self._build_mesh()

    # -- mesh construction ------------------------------------------------
    def _build_mesh(self) -> None:
        seg_ids: list[int] = []
        # per-vertex template: segment, axial fraction, radial offset (3), palm flag, palm position (3)
        v_seg, v_axial, v_off, v_palm = [], [], [], []
        weights = []
        faces = []
        face_seg = []

        def add_capsule(seg: int, parent_seg: int, tip: bool) -> None:
            n = CAPSULE_AROUND
            end_scale = 1.0 if tip else JOINT_CAP_SCALE
            th = 2 * np.pi * np.arange(n) / n
            rings = []  # (axial, cx, rho)
            rings.append((0.0, -1.0, 0.0))
            for a in CAPSULE_CAP:
                rings.append((0.0, -np.cos(a), np.sin(a)))
            for s in CAPSULE_AXIAL:
                rings.append((s, 0.0, 1.0))
            for a in CAPSULE_CAP[::-1]:
                rings.append((1.0, end_scale * np.cos(a), np.sin(a)))
            rings.append((1.0, end_scale, 0.0))
            index = []
            for axial, cx, rho in rings:
                count = 1 if rho == 0.0 else n
                ids = []
                for k in range(count):
                    ang = th[k] if count > 1 else 0.0
                    v_seg.append(seg)
                    v_axial.append(axial)
                    v_off.append((cx, rho * np.sin(ang), rho * np.cos(ang)))
                    v_palm.append((0.0, 0.0, 0.0))
                    w = np.zeros(len(SEGMENT_NAMES))
                    wp = 0.5 * max(-cx, 0.0)
                    w[seg] = 1.0 - wp
                    w[parent_seg] += wp
                    weights.append(w)
                    ids.append(len(v_seg) - 1)
                index.append(ids)
            for r0, r1 in zip(index[:-1], index[1:]):
                if len(r0) == 1:
                    for k in range(n):
                        faces.append((r0[0], r1[k], r1[(k + 1) % n]))
                        face_seg.append(seg)
                elif len(r1) == 1:
                    for k in range(n):
                        faces.append((r0[k], r1[0], r0[(k + 1) % n]))
                        face_seg.append(seg)
                else:
                    for k in range(n):
                        a, b = r0[k], r0[(k + 1) % n]
                        c, d = r1[k], r1[(k + 1) % n]
                        faces.append((a, c, d))
                        faces.append((a, d, b))
                        face_seg.extend([seg, seg])

        def add_palm() -> None:
            from .mesh import box_mesh

            lo, hi = np.array(PALM_LO), np.array(PALM_HI)
            V, F = box_mesh(tuple(hi - lo), cell=0.0125)
            V = V + (lo + hi) / 2
            base = len(v_seg)
            dorsum, palm = SEGMENT_NAMES.index("dorsum"), SEGMENT_NAMES.index("palm")
            for v in V:
                s = dorsum if v[2] >= 0 else palm
                v_seg.append(s)
                v_axial.append(0.0)
                v_off.append((0.0, 0.0, 0.0))
                v_palm.append(tuple(v))
                w = np.zeros(len(SEGMENT_NAMES))
                w[s] = 1.0
                weights.append(w)
            for f in F:
                faces.append(tuple(int(i) + base for i in f))
                face_seg.append(dorsum if V[f].mean(axis=0)[2] >= 0 else palm)

        add_palm()
        for f in FINGERS:
            for k, p in enumerate(PHALANGES):
                seg = SEGMENT_NAMES.index(f"{f}_{p}")
                parent = SEGMENT_NAMES.index("dorsum") if k == 0 else SEGMENT_NAMES.index(f"{f}_{PHALANGES[k - 1]}")
                add_capsule(seg, parent, tip=(k == 2))
                seg_ids.append(seg)

        self.faces = np.asarray(faces, dtype=np.int64)
        self.face_segment = np.asarray(face_seg, dtype=np.int64)
        self.weights = np.asarray(weights)
        self._v_seg = np.asarray(v_seg)
        self._v_axial = np.asarray(v_axial)
        self._v_off = np.asarray(v_off)
        self._v_palm = np.asarray(v_palm)
        self._is_palm = np.isin(self._v_seg, [0, 1])

        # orient every triangle outward w.r.t. its own component
        V = self.rest_vertices()
        a, b, c = V[self.faces[:, 0]], V[self.faces[:, 1]], V[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        centroid = (a + b + c) / 3
        ref = np.empty_like(centroid)
        for s in range(len(SEGMENT_NAMES)):
            m = self.face_segment == s
            if s < 2:
                ref[m] = (np.array(PALM_LO) + np.array(PALM_HI)) / 2
            else:
                j = self.segment_joint_array[s]
                J = self.rest_joints()[j]
                axis = self.rest_frames[j][:, 0]
                proj = np.clip((centroid[m] - J) @ axis, 0, self.segment_length(SEGMENT_NAMES[s]))
                ref[m] = J + proj[:, None] * axis
        flip = np.einsum("ij,ij->i", n, centroid - ref) < 0
        self.faces[flip] = self.faces[flip][:, [0, 2, 1]]
        self.segment_triangles = {s: np.flatnonzero(self.face_segment == i) for i, s in enumerate(SEGMENT_NAMES)}

    # -- shape-dependent rest geometry ------------------------------------
    def _shape_factors(self, beta):
        beta = jnp.asarray(beta)
        g = 1.0 + SCALE_PER_UNIT * beta[0]
        lengths, radii = [], []
        for fi, f in enumerate(FINGERS):
            lf = 1.0 + LENGTH_PER_UNIT * beta[1 + fi]
            rf = 1.0 + RADIUS_PER_UNIT * (beta[9] if f == "thumb" else beta[6])
            for k in range(3):
                lengths.append(g * lf * BONE_LENGTHS[f][k])
                radii.append(g * rf * BONE_RADII[f][k])
        palm_scale = g * jnp.stack([1.0 + PALM_PER_UNIT * beta[8], 1.0 + PALM_PER_UNIT * beta[7], jnp.ones_like(beta[0])])
        return jnp.stack(lengths), jnp.stack(radii), palm_scale

    def _rest_geometry(self, beta):
        lengths, radii, palm_scale = self._shape_factors(beta)
        Q = jnp.asarray(self.rest_frames)
        J = [jnp.zeros(3)]
        for f in FINGERS:
            mcp = palm_scale * jnp.asarray(MCP_POSITIONS[f])
            fi = FINGERS.index(f)
            J.append(mcp)
            J.append(J[-1] + Q[1 + 3 * fi][:, 0] * lengths[3 * fi])
            J.append(J[-1] + Q[2 + 3 * fi][:, 0] * lengths[3 * fi + 1])
        J = jnp.stack(J)
        seg = self._v_seg
        cap = np.maximum(seg - 2, 0)
        joint = self.segment_joint_array[seg]
        L = lengths[cap]
        r = radii[cap]
        off = jnp.asarray(self._v_off)
        local = jnp.stack([self._v_axial * L + r * off[:, 0], r * off[:, 1], r * off[:, 2]], axis=1)
        finger = J[joint] + jnp.einsum("vij,vj->vi", Q[joint], local)
        palm = palm_scale * jnp.asarray(self._v_palm)
        V = jnp.where(self._is_palm[:, None], palm, finger)
        return J, V

    def rest_joints(self, beta=None) -> np.ndarray:
        return np.asarray(self._jit_rest(jnp.zeros(N_BETA) if beta is None else jnp.asarray(beta, float))[0])

    def rest_vertices(self, beta=None) -> np.ndarray:
        return np.asarray(self._jit_rest(jnp.zeros(N_BETA) if beta is None else jnp.asarray(beta, float))[1])

    def segment_length(self, seg: str, beta=None) -> float:
        f, p = seg.split("_")
        b = np.zeros(N_BETA) if beta is None else np.asarray(beta)
        lengths, _, _ = self._shape_factors(b)
        return float(lengths[3 * FINGERS.index(f) + PHALANGES.index(p)])

    def segment_radius(self, seg: str, beta=None) -> float:
        f, p = seg.split("_")
        b = np.zeros(N_BETA) if beta is None else np.asarray(beta)
        _, radii, _ = self._shape_factors(b)
        return float(radii[3 * FINGERS.index(f) + PHALANGES.index(p)])

    def palm_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(PALM_LO), np.array(PALM_HI)

    # -- kinematics ---------------------------------------------------------
    def forward_kinematics_jax(self, t, o6, phi, J):
        """Global joint rotations ``A`` (16,3,3) and positions ``p`` (16,3)."""
        Rj = dof_to_joint_rotations(phi)
        Q = jnp.asarray(self.rest_frames)
        A = [_rot6d(o6)]
        p = [jnp.asarray(t) + A[0] @ J[0]]
        for j in range(1, len(JOINT_NAMES)):
            par = int(self.parents[j])
            carry = A[par] @ Q[par].T
            A.append(carry @ Q[j] @ Rj[j - 1])
            p.append(p[par] + carry @ (J[j] - J[par]))
        return jnp.stack(A), jnp.stack(p)

    def segment_transforms_jax(self, t, o6, phi, J):
        A, p = self.forward_kinematics_jax(t, o6, phi, J)
        Q = jnp.asarray(self.rest_frames)
        js = self.segment_joint_array
        M = A[js] @ jnp.transpose(Q[js], (0, 2, 1))
        tau = p[js] - jnp.einsum("sij,sj->si", M, J[js])
        return M, tau

    def forward_kinematics(self, pose: HandPose, beta=None) -> tuple[np.ndarray, np.ndarray]:
        J = self.rest_joints(beta)
        A, p = _fk_jit(self, jnp.asarray(pose.t), jnp.asarray(pose.o6), jnp.asarray(pose.phi), jnp.asarray(J))
        return np.asarray(A), np.asarray(p)

    def skin_jax(self, Vrest, W, M, tau):
        posed = jnp.einsum("sij,vj->vsi", M, Vrest) + tau[None]
        return jnp.einsum("vs,vsi->vi", W, posed)

    def skin_mesh(self, M: np.ndarray, tau: np.ndarray, beta=None) -> np.ndarray:
        """Linear blend skinning of the rest mesh with per-segment transforms."""
        V = self.rest_vertices(beta)
        return np.asarray(self.skin_jax(jnp.asarray(V), jnp.asarray(self.weights), jnp.asarray(M), jnp.asarray(tau)))

    def posed_vertices(self, pose: HandPose, beta=None) -> np.ndarray:
        b = jnp.zeros(N_BETA) if beta is None else jnp.asarray(beta, float)
        return np.asarray(_posed_jit(self, jnp.asarray(pose.t), jnp.asarray(pose.o6), jnp.asarray(pose.phi), b))

    def posed_vertices_jax(self, t, o6, phi, beta):
        J, V = self._rest_geometry(beta)
        M, tau = self.segment_transforms_jax(t, o6, phi, J)
        return self.skin_jax(V, jnp.asarray(self.weights), M, tau)

    def marker_positions_jax(self, t, o6, phi, beta, tri_vertices, bary, vertex_subset=None):
        """Surface points for bindings: ``tri_vertices`` (N,3) vertex ids, ``bary`` (N,3)."""
        J, V = self._rest_geometry(beta)
        M, tau = self.segment_transforms_jax(t, o6, phi, J)
        if vertex_subset is None:
            posed = self.skin_jax(V, jnp.asarray(self.weights), M, tau)
            return jnp.einsum("nk,nki->ni", bary, posed[tri_vertices])
        posed = self.skin_jax(V[vertex_subset], jnp.asarray(self.weights[vertex_subset]), M, tau)
        return jnp.einsum("nk,nki->ni", bary, posed[tri_vertices])

    # -- queries --------------------------------------------------------------
    def closest_point_on_submesh(self, query, posed_vertices: np.ndarray, segment: str):
        if segment not in self.segment_triangles:
            raise KeyError(f"unknown segment {segment!r}")
        tris = self.segment_triangles[segment]
        tri, bary, dist = closest_point_on_mesh(np.atleast_2d(query), posed_vertices, self.faces, tris)
        if np.ndim(query) == 1:
            return int(tri[0]), bary[0], float(dist[0])
        return tri, bary, dist

    def descendants(self, joint: int) -> list[int]:
        out = [joint]
        for j in range(len(JOINT_NAMES)):
            if self.parents[j] == joint:
                out += self.descendants(j)
        return out

    def joint_dofs(self, joint: str) -> list[int]:
        return [k for k, (j, _) in enumerate(DOF_MAP) if j == joint]

    def to_dict(self) -> dict:
        return {
            "joints": list(JOINT_NAMES),
            "parents": self.parents.tolist(),
            "rest_frames": self.rest_frames.tolist(),
            "rest_joints": self.rest_joints().tolist(),
            "dof_map": [[j, int(a)] for j, a in DOF_MAP],
            "phi_low": self.phi_low.tolist(),
            "phi_high": self.phi_high.tolist(),
            "segments": list(SEGMENT_NAMES),
            "vertices": self.rest_vertices().tolist(),
            "faces": self.faces.tolist(),
            "weights": self.weights.tolist(),
            "face_segment": self.face_segment.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@partial(jax.jit, static_argnums=0)
def _fk_jit(hand, t, o6, phi, J):
    return hand.forward_kinematics_jax(t, o6, phi, J)


@partial(jax.jit, static_argnums=0)
def _posed_jit(hand, t, o6, phi, beta):
    return hand.posed_vertices_jax(t, o6, phi, beta)


def dof_to_joint_rotations_np(phi) -> np.ndarray:
    return np.asarray(dof_to_joint_rotations(jnp.asarray(phi, dtype=float)))


def forward_kinematics(hand: KinematicHand, pose: HandPose, beta=None):
    return hand.forward_kinematics(pose, beta)


def surface_point(posed_vertices: np.ndarray, faces: np.ndarray, tri: int, bary) -> np.ndarray:
    b = np.asarray(bary, dtype=float)
    if b.shape != (3,) or np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("invalid barycentric coordinates")
    return b @ posed_vertices[faces[tri]]


# ---------------------------------------------------------------------------
# shape fitting


def chamfer_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Mean of the two directional mean nearest-neighbour distances."""
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty point cloud")
    d_ab = cKDTree(B).query(A)[0]
    d_ba = cKDTree(A).query(B)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def sample_surface(hand: KinematicHand, n: int, seed: int = 0, beta=None, pose: HandPose | None = None):
    """Area-weighted surface samples; returns (points, tri, bary)."""
    rng = np.random.default_rng(seed)
    V = hand.rest_vertices(beta) if pose is None else hand.posed_vertices(pose, beta)
    F = hand.faces
    area = 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1)
    tri = rng.choice(len(F), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", bary, V[F[tri]])
    return pts, tri, bary


def _nearest_on_mesh(points: np.ndarray, V: np.ndarray, F: np.ndarray, k: int = 12):
    """Closest surface point using a centroid KD-tree shortlist of ``k`` triangles."""
    tree = cKDTree(V[F].mean(axis=1))
    _, cand = tree.query(points, k=k)
    a, b, c = V[F[cand, 0]], V[F[cand, 1]], V[F[cand, 2]]
    q, bary = closest_point_on_triangles(points[:, None, :], a, b, c)
    d = np.linalg.norm(q - points[:, None, :], axis=-1)
    best = d.argmin(axis=1)
    rows = np.arange(len(points))
    return cand[rows, best], bary[rows, best]


def _pca_normals(points: np.ndarray, k: int = 12) -> np.ndarray:
    k = min(k, len(points))
    _, nb = cKDTree(points).query(points, k=k)
    nbp = points[nb] - points[nb].mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nbp, nbp))
    return vecs[:, :, 0]


def fit_shape(
    hand: KinematicHand,
    scan: np.ndarray,
    finger_lengths: dict[str, float] | None = None,
    iterations: int = 300,
    lr: float = 0.05,
    n_samples: int = 8000,
    reassociate_every: int = 10,
    seed: int = 0,
    refine_rounds: int = 4,
) -> HandShapeParams:
    """Fit ``beta`` to an aligned scan by Adam on a symmetric Chamfer-style objective.

    Model samples sit at fixed barycentric positions. The model-to-scan term
    projects each sample's offset from its nearest scan point on the average
    of the model normal and the scan normal (PCA of 12 scan neighbours). Plain
    nearest-point distances, or either normal alone, bias curved surfaces on
    a sparse scan; the averaged normal cancels that to second order. The
    scan-to-model term uses closest surface points. Correspondences are
    refreshed every ``reassociate_every`` iterations. ``finger_lengths`` maps
    finger name to total length (m).
    """
    scan = np.asarray(scan, dtype=float).reshape(-1, 3)
    if len(scan) == 0:
        raise ValueError("empty scan")
    _, s_tri, s_bary = sample_surface(hand, n_samples, seed=seed)
    F = hand.faces
    s_verts = jnp.asarray(F[s_tri])
    s_bary = jnp.asarray(s_bary)
    scan_j = jnp.asarray(scan)
    normals = _pca_normals(scan)
    targets = [(FINGERS.index(f), float(v)) for f, v in (finger_lengths or {}).items()]

    n1, n2 = float(len(s_tri)), float(len(scan))

    def residuals(beta, nn_idx, pair_normals, c_verts, c_bary):
        lengths, _, _ = hand._shape_factors(beta)
        _, V = hand._rest_geometry(beta)
        model = jnp.einsum("nk,nki->ni", s_bary, V[s_verts])
        r1 = jnp.sum((model - scan_j[nn_idx]) * pair_normals, axis=1) / jnp.sqrt(n1)
        corr = jnp.einsum("nk,nki->ni", c_bary, V[c_verts])
        r2 = (scan_j - corr).ravel() / jnp.sqrt(n2)
        r3 = [jnp.sum(lengths[3 * fi : 3 * fi + 3]) - val for fi, val in targets]
        return jnp.concatenate([r1, r2, jnp.stack(r3) if r3 else jnp.zeros(0)])

    def loss(beta, *corr):
        r = residuals(beta, *corr)
        return jnp.sum(r * r)

    def associate(beta):
        V = hand.rest_vertices(beta)
        model = np.einsum("nk,nki->ni", np.asarray(s_bary), V[np.asarray(s_verts)])
        nn = tree.query(model)[1]
        n_model = face_normals(V, F[np.asarray(s_tri)])
        n_scan = normals[nn] * np.sign(np.sum(normals[nn] * n_model, axis=1, keepdims=True) + 1e-300)
        pair = n_model + n_scan
        pair /= np.linalg.norm(pair, axis=1, keepdims=True)
        c_tri, c_bary = _nearest_on_mesh(scan, V, F)
        return jnp.asarray(nn), jnp.asarray(pair), jnp.asarray(F[c_tri]), jnp.asarray(c_bary)

    grad = jax.jit(jax.grad(loss))
    beta = np.zeros(N_BETA)
    m = np.zeros(N_BETA)
    v = np.zeros(N_BETA)
    tree = cKDTree(scan)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(iterations):
        if it % reassociate_every == 0:
            corr = associate(beta)
        g = np.asarray(grad(jnp.asarray(beta), *corr))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** (it + 1))
        vh = v / (1 - b2 ** (it + 1))
        beta = np.clip(beta - lr * mh / (np.sqrt(vh) + eps), -3.0, 3.0)

    # bounded Gauss-Newton polish: resolves weakly observable directions
    # (global scale against per-part scales) that Adam only creeps along
    res_j = jax.jit(residuals)
    jac_j = jax.jit(jax.jacfwd(residuals))
    for _ in range(refine_rounds):
        corr = associate(beta)
        sol = least_squares(
            lambda b: 1e3 * np.asarray(res_j(jnp.asarray(b), *corr)),  # millimetres keep tolerances meaningful
            beta,
            jac=lambda b: 1e3 * np.asarray(jac_j(jnp.asarray(b), *corr)),
            bounds=(-3.0, 3.0),
            max_nfev=20,
        )
        beta = np.clip(sol.x, -3.0, 3.0)
    return HandShapeParams(beta)

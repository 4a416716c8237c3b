"""Marker-to-surface calibration and per-frame hand pose solving.

Each marker is bound to a fixed triangle and barycentric position on the
hand mesh. Its predicted position is the skinned surface point, and a pose
is found by Adam on the sum of squared marker residuals plus a soft
joint-limit penalty. Joints whose markers (and all distal markers) are
hidden keep their previous values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ._jax import jax, jnp
from .geometry import GeometryError, kabsch_align, matrix_to_rot6d, rot6d_to_matrix
from .hand_model import JOINT_NAMES, N_BETA, N_DOF, SEGMENT_NAMES, HandPose, KinematicHand
from .io import read_json, write_json, write_jsonl
from .marker_model import MarkerID, MarkerLayout

N_PARAMS = 3 + 6 + N_DOF
ROOT_SEGMENTS = ("dorsum", "palm")


class SolverError(RuntimeError):
    """Raised for numerically or structurally unconstrained problems."""


@dataclass
class MarkerBinding:
    marker_id: MarkerID
    segment: str
    tri: int
    bary: np.ndarray

    def __post_init__(self) -> None:
        self.bary = np.asarray(self.bary, dtype=float).reshape(3)
        if np.any(self.bary < -1e-12) or abs(self.bary.sum() - 1.0) > 1e-9:
            raise ValueError(f"invalid barycentric coordinates for {self.marker_id}")
        if self.segment not in SEGMENT_NAMES:
            raise ValueError(f"unknown segment {self.segment!r}")

    def check(self, hand: KinematicHand) -> None:
        if hand.face_segment[self.tri] != SEGMENT_NAMES.index(self.segment):
            raise ValueError(f"{self.marker_id}: triangle {self.tri} is not on segment {self.segment}")

    def to_dict(self) -> dict:
        return {"marker_id": self.marker_id.to_dict(), "segment": self.segment, "tri": int(self.tri), "bary": self.bary.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerBinding":
        return cls(MarkerID.from_dict(d["marker_id"]), d["segment"], int(d["tri"]), d["bary"])


@dataclass
class BindingSet:
    """Bindings in array form, ordered by marker id."""

    ids: list[MarkerID]
    segments: list[str]
    tri: np.ndarray
    bary: np.ndarray

    @classmethod
    def from_bindings(cls, bindings: list[MarkerBinding]) -> "BindingSet":
        bs = sorted(bindings, key=lambda b: b.marker_id)
        return cls(
            [b.marker_id for b in bs],
            [b.segment for b in bs],
            np.array([b.tri for b in bs], dtype=np.int64),
            np.array([b.bary for b in bs], dtype=float).reshape(-1, 3),
        )

    def bindings(self) -> list[MarkerBinding]:
        return [MarkerBinding(m, s, int(t), b) for m, s, t, b in zip(self.ids, self.segments, self.tri, self.bary)]

    def copy(self) -> "BindingSet":
        return BindingSet(list(self.ids), list(self.segments), self.tri.copy(), self.bary.copy())

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> dict[MarkerID, int]:
        return {m: k for k, m in enumerate(self.ids)}

    def surface_points(self, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nkd->nd", self.bary, vertices[faces[self.tri]])


def save_bindings(path, bindings: BindingSet | list[MarkerBinding]) -> None:
    items = bindings.bindings() if isinstance(bindings, BindingSet) else bindings
    write_json(path, [b.to_dict() for b in items])


def load_bindings(path) -> BindingSet:
    return BindingSet.from_bindings([MarkerBinding.from_dict(d) for d in read_json(path)])


@dataclass
class SolverConfig:
    learning_rate: float = 0.002
    epochs: int = 400
    calib_first_frame_iters: int = 1000
    calib_iters: int = 400
    lambda_reg: float = 1.0
    grad_tol: float = 1e-7
    reassociate_every: int = 50
    exact_epochs: bool = False  # disable the gradient-norm early stop
    refine_iters: int = 10  # damped Gauss-Newton polish after Adam; 0 gives the plain Adam solver

    def __post_init__(self) -> None:
        for name in ("learning_rate", "epochs", "calib_first_frame_iters", "calib_iters", "lambda_reg", "grad_tol", "reassociate_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverConfig.{name} must be positive")
        if self.refine_iters < 0:
            raise ValueError("SolverConfig.refine_iters must be non-negative")


# ---------------------------------------------------------------------------
# objective


def e_reg(phi, low, high):
    """Squared distance of ``phi`` to the box ``[low, high]``."""
    phi = jnp.asarray(phi)
    return jnp.sum((jnp.clip(phi, low, high) - phi) ** 2)


def marker_basis(hand: KinematicHand, rest_vertices: np.ndarray, tri: np.ndarray, bary: np.ndarray):
    """Per-marker blend of its triangle's skinning data.

    Linear blend skinning is linear in the rest vertex, so a bound surface
    point is ``sum_s M_s P[n, s] + Wm[n, s] tau_s`` with ``Wm`` the
    barycentric mix of vertex weights and ``P`` the matching mix of
    weighted rest positions.
    """
    tv = hand.faces[tri]
    Wv = hand.weights[tv]  # (N, 3, S)
    Wm = np.einsum("nk,nks->ns", bary, Wv)
    Pm = np.einsum("nk,nks,nkd->nsd", bary, Wv, rest_vertices[tv])
    return jnp.asarray(Pm), jnp.asarray(Wm)


def _predict(hand: KinematicHand, x, J, Pm, Wm):
    M, tau = hand.segment_transforms_jax(x[:3], x[3:9], x[9:], J)
    return jnp.einsum("sij,nsj->ni", M, Pm) + Wm @ tau


def _e_point(hand, x, J, Pm, Wm, obs, w):
    r = _predict(hand, x, J, Pm, Wm) - obs
    return jnp.sum(w * jnp.sum(r * r, axis=1))


def _energy(hand, x, J, Pm, Wm, obs, w, low, high, lam):
    return _e_point(hand, x, J, Pm, Wm, obs, w) + lam * e_reg(x[9:], low, high)


@partial(jax.jit, static_argnums=(0,))
def _energy_and_grad(hand, x, J, Pm, Wm, obs, w, low, high, lam):
    return jax.value_and_grad(partial(_energy, hand))(x, J, Pm, Wm, obs, w, low, high, lam)


def _residuals(hand, x, J, Pm, Wm, obs, w, low, high, lam):
    r = (_predict(hand, x, J, Pm, Wm) - obs) * jnp.sqrt(w)[:, None]
    phi = x[9:]
    return jnp.concatenate([r.ravel(), jnp.sqrt(lam) * (jnp.clip(phi, low, high) - phi)])


@partial(jax.jit, static_argnums=(0,))
def _residuals_and_jacobian(hand, x, *args):
    f = partial(_residuals, hand)
    return f(x, *args), jax.jacfwd(f)(x, *args)


@partial(jax.jit, static_argnums=(0, 1))
def _adam(hand, n_steps, x0, m0, v0, step0, free, J, Pm, Wm, obs, w, low, high, lam, lr, tol):
    """Masked Adam; returns the lowest-energy iterate, updated moments and the step count."""
    vg = jax.value_and_grad(partial(_energy, hand))
    b1, b2, eps = 0.9, 0.999, 1e-8
    args = (J, Pm, Wm, obs, w, low, high, lam)

    def cond(s):
        k, _, _, _, _, _, gn = s
        return (k < n_steps) & (gn > tol)

    def body(s):
        k, x, m, v, best_x, best_e, _ = s
        e, g = vg(x, *args)
        g = jnp.where(free, g, 0.0)
        better = e < best_e
        best_x = jnp.where(better, x, best_x)
        best_e = jnp.where(better, e, best_e)
        t = step0 + k + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = jnp.where(free, x - lr * mh / (jnp.sqrt(vh) + eps), x)
        return k + 1, x, m, v, best_x, best_e, jnp.linalg.norm(g)

    init = (0, x0, m0, v0, x0, jnp.inf, jnp.inf)
    k, x, m, v, best_x, best_e, _ = jax.lax.while_loop(cond, body, init)
    e_last = _energy(hand, x, *args)
    best_x = jnp.where(e_last < best_e, x, best_x)
    return jnp.where(free, best_x, x0), m, v, k


def _canonical_o6(x: np.ndarray) -> np.ndarray:
    """Replace the 6D rotation by orthonormal columns; the pose is unchanged.

    The 6D parameters have a 3-dimensional gauge (column lengths and the
    in-plane part of the second column). Left alone it drifts over long warm
    started sequences and degrades the conditioning of later solves.
    """
    x = np.array(x, dtype=float)
    x[3:9] = matrix_to_rot6d(rot6d_to_matrix(x[3:9]))
    return x


class HandSolver:
    """Holds the rest geometry of one subject (fixed ``beta``) and bound markers."""

    def __init__(self, hand: KinematicHand, beta=None, config: SolverConfig | None = None):
        self.hand = hand
        self.beta = np.zeros(N_BETA) if beta is None else np.asarray(beta, float).reshape(N_BETA)
        self.config = config or SolverConfig()
        self.J = jnp.asarray(hand.rest_joints(self.beta))
        self.Vrest = hand.rest_vertices(self.beta)
        self.low = jnp.asarray(hand.phi_low)
        self.high = jnp.asarray(hand.phi_high)

    # -- helpers ------------------------------------------------------------
    def _arrays(self, bindings: BindingSet):
        return marker_basis(self.hand, self.Vrest, bindings.tri, bindings.bary)

    def _obs_arrays(self, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]):
        obs = np.zeros((len(bindings), 3))
        w = np.zeros(len(bindings))
        for k, mid in enumerate(bindings.ids):
            p = observed.get(mid)
            if p is not None and np.all(np.isfinite(p)):
                obs[k] = p
                w[k] = 1.0
        return obs, w

    def predict(self, pose: HandPose, bindings: BindingSet) -> np.ndarray:
        Pm, Wm = self._arrays(bindings)
        return np.asarray(_predict(self.hand, jnp.asarray(pose.as_vector()), self.J, Pm, Wm))

    def posed_vertices(self, pose: HandPose) -> np.ndarray:
        return self.hand.posed_vertices(pose, self.beta)

    def e_point(self, pose: HandPose, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]) -> float:
        """Sum of squared residuals over visible bound markers (m^2)."""
        obs, w = self._obs_arrays(bindings, observed)
        if not w.any():
            raise SolverError("unconstrained frame: no visible bound markers")
        Pm, Wm = self._arrays(bindings)
        return float(_e_point(self.hand, jnp.asarray(pose.as_vector()), self.J, Pm, Wm, jnp.asarray(obs), jnp.asarray(w)))

    def energy_and_grad(self, x: np.ndarray, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]):
        obs, w = self._obs_arrays(bindings, observed)
        Pm, Wm = self._arrays(bindings)
        e, g = _energy_and_grad(
            self.hand, jnp.asarray(x, float), self.J, Pm, Wm, jnp.asarray(obs), jnp.asarray(w),
            self.low, self.high, self.config.lambda_reg,
        )
        return float(e), np.asarray(g)

    def mre(self, pose: HandPose, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]) -> float:
        obs, w = self._obs_arrays(bindings, observed)
        if not w.any():
            raise SolverError("unconstrained frame: no visible bound markers")
        d = np.linalg.norm(self.predict(pose, bindings) - obs, axis=1)
        return float(d[w > 0].mean())

    def _run_adam(self, x0, free, bindings, obs, w, n_steps, state=None):
        Pm, Wm = self._arrays(bindings)
        m0, v0, step0 = state if state is not None else (jnp.zeros(N_PARAMS), jnp.zeros(N_PARAMS), 0)
        tol = 0.0 if self.config.exact_epochs else self.config.grad_tol
        x, m, v, k = _adam(
            self.hand, int(n_steps), jnp.asarray(x0), m0, v0, step0, jnp.asarray(free), self.J, Pm, Wm,
            jnp.asarray(obs), jnp.asarray(w), self.low, self.high, self.config.lambda_reg, self.config.learning_rate, tol,
        )
        x = np.array(x)
        if self.config.refine_iters:
            x = self._refine(x, free, Pm, Wm, obs, w)
        return x, (m, v, step0 + int(k)), int(k)

    def _refine(self, x, free, Pm, Wm, obs, w):
        """Levenberg-Marquardt on the same objective; only steps that lower the energy are kept."""
        args = (self.J, Pm, Wm, jnp.asarray(obs), jnp.asarray(w), self.low, self.high, self.config.lambda_reg)
        r, Jm = (np.asarray(a) for a in _residuals_and_jacobian(self.hand, jnp.asarray(x), *args))
        e = float(r @ r)
        mu = 1e-3
        for _ in range(self.config.refine_iters):
            Jf = Jm[:, free]
            A = Jf.T @ Jf
            g = Jf.T @ r
            d = np.diag(A)
            step = np.linalg.solve(A + mu * np.diag(d + 1e-9 * max(d.max(), 1e-30)), -g)
            x_new = x.copy()
            x_new[free] += step
            r_new, J_new = (np.asarray(a) for a in _residuals_and_jacobian(self.hand, jnp.asarray(x_new), *args))
            e_new = float(r_new @ r_new)
            if e_new < e:
                x, r, Jm, e = x_new, r_new, J_new, e_new
                mu = max(mu / 10, 1e-12)
            else:
                mu *= 10
            if np.linalg.norm(g) < self.config.grad_tol * 1e-3:
                break
        return x

    # -- calibration -------------------------------------------------------
    def initial_bindings(self, layout: MarkerLayout, ids: list[MarkerID] | None = None) -> BindingSet:
        """Nominal bindings: layout positions snapped to their segment on this subject's rest mesh."""
        ids = sorted(ids or layout.ids())
        J = np.asarray(self.J)
        tri = np.empty(len(ids), dtype=np.int64)
        bary = np.empty((len(ids), 3))
        segs = []
        by_seg: dict[str, list[int]] = {}
        for k, mid in enumerate(ids):
            seg = layout.attachment(mid)
            if seg not in self.hand.segment_triangles:
                raise SolverError(f"marker {mid} has unknown segment {seg!r}")
            segs.append(seg)
            by_seg.setdefault(seg, []).append(k)
        for seg, ks in by_seg.items():
            j = self.hand.segment_joint[seg]
            world = np.array([layout.position(ids[k]) for k in ks]) @ self.hand.rest_frames[j].T + J[j]
            t, b, _ = self.hand.closest_point_on_submesh(world, self.Vrest, seg)
            tri[ks], bary[ks] = t, b
        return BindingSet(ids, segs, tri, bary)

    def reassociate(self, pose: HandPose, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]) -> BindingSet:
        """Re-bind each visible marker to the closest point of its own segment at ``pose``."""
        V = self.posed_vertices(pose)
        out = bindings.copy()
        by_seg: dict[str, list[int]] = {}
        for k, (mid, seg) in enumerate(zip(bindings.ids, bindings.segments)):
            p = observed.get(mid)
            if p is not None and np.all(np.isfinite(p)):
                by_seg.setdefault(seg, []).append(k)
        for seg, ks in by_seg.items():
            q = np.array([observed[bindings.ids[k]] for k in ks])
            t, b, _ = self.hand.closest_point_on_submesh(q, V, seg)
            out.tri[ks], out.bary[ks] = t, b
        return out

    def root_init(self, bindings: BindingSet, observed: dict[MarkerID, np.ndarray]) -> HandPose:
        """Kabsch fit of the rest-pose root markers onto their observations."""
        rest = bindings.surface_points(self.Vrest, self.hand.faces)
        ks = [k for k, (m, s) in enumerate(zip(bindings.ids, bindings.segments)) if s in ROOT_SEGMENTS and m in observed]
        if len(ks) < 4:
            raise SolverError("unconstrained frame: fewer than 4 visible root markers")
        try:
            T = kabsch_align(rest[ks], np.array([observed[bindings.ids[k]] for k in ks]))
        except GeometryError as exc:
            raise SolverError(f"unconstrained frame: {exc}") from exc
        # the model root sits at J[0] = 0 so the rigid transform maps directly to (t, R)
        return HandPose(T.translation, matrix_to_rot6d(T.rotation), np.zeros(N_DOF))

    def calibrate(
        self,
        frames: list[dict[MarkerID, np.ndarray]],
        bindings: BindingSet,
        init_pose: HandPose | None = None,
    ) -> tuple[BindingSet, list[HandPose], list[float]]:
        """Alternate Adam pose steps and submesh-restricted re-association over a sequence.

        Returns the final bindings, per-frame poses and per-frame MRE (m).
        """
        cfg = self.config
        free = np.ones(N_PARAMS, dtype=bool)
        poses, mres = [], []
        pose = init_pose
        for fi, observed in enumerate(frames):
            root = [m for m, s in zip(bindings.ids, bindings.segments) if s in ROOT_SEGMENTS and m in observed]
            if len(root) < 4:
                raise SolverError(f"calibration frame {fi}: fewer than 4 visible root markers")
            # the root is re-seeded by Kabsch on every frame so large inter-frame
            # rotations of the calibration motion cannot trap the optimiser
            root_pose = self.root_init(bindings, observed)
            pose = root_pose if pose is None else HandPose(root_pose.t, root_pose.o6, pose.phi)
            iters = cfg.calib_first_frame_iters if fi == 0 else cfg.calib_iters
            x = _canonical_o6(pose.as_vector())
            state = None
            done = 0
            while done < iters:
                n = min(cfg.reassociate_every, iters - done)
                obs, w = self._obs_arrays(bindings, observed)
                x, state, _ = self._run_adam(x, free, bindings, obs, w, n, state)
                done += n
                bindings = self.reassociate(HandPose.from_vector(x), bindings, observed)
            pose = HandPose.from_vector(x)
            poses.append(pose)
            mres.append(self.mre(pose, bindings, observed))
        return bindings, poses, mres

    # -- solving -----------------------------------------------------------
    def freeze_occluded_dofs(self, visible: dict[MarkerID, bool] | set[MarkerID], bindings: BindingSet) -> tuple[set[int], bool]:
        return freeze_occluded_dofs(visible, self.hand, bindings)

    def solve_frame(
        self, observed: dict[MarkerID, np.ndarray], previous: HandPose, bindings: BindingSet
    ) -> "FrameSolution":
        obs, w = self._obs_arrays(bindings, observed)
        if not w.any():
            raise SolverError("unconstrained frame: no visible bound markers")
        visible = {m for m, wk in zip(bindings.ids, w) if wk > 0}
        frozen, root_frozen = freeze_occluded_dofs(visible, self.hand, bindings)
        free = np.ones(N_PARAMS, dtype=bool)
        free[[9 + k for k in frozen]] = False
        if root_frozen:
            free[:9] = False
        x0 = previous.as_vector()
        start = x0 if root_frozen else _canonical_o6(x0)
        x, _, k = self._run_adam(start, free, bindings, obs, w, self.config.epochs)
        x[~free] = x0[~free]
        pose = HandPose.from_vector(x)
        ep = self.e_point(pose, bindings, observed)
        er = float(e_reg(jnp.asarray(pose.phi), self.low, self.high))
        return FrameSolution(pose, ep, er, self.mre(pose, bindings, observed), sorted(frozen), root_frozen, k)

    def solve_sequence(
        self, frames: list[dict[MarkerID, np.ndarray]], init: HandPose | None, bindings: BindingSet
    ) -> list["FrameSolution"]:
        """Solve frames in order, each warm-started from the previous solution.

        Without ``init`` the first frame starts from a Kabsch fit of its root markers.
        """
        out = []
        pose = init if init is not None else (self.root_init(bindings, frames[0]) if frames else None)
        for observed in frames:
            sol = self.solve_frame(observed, pose, bindings)
            out.append(sol)
            pose = sol.pose
        return out


@dataclass
class FrameSolution:
    pose: HandPose
    e_point: float
    e_reg: float
    mre: float
    frozen: list[int] = field(default_factory=list)
    root_frozen: bool = False
    epochs: int = 0

    def to_record(self, frame: int) -> dict:
        return {
            "frame": int(frame),
            "t": self.pose.t.tolist(),
            "o6": self.pose.o6.tolist(),
            "phi": self.pose.phi.tolist(),
            "frozen": list(self.frozen),
            "root_frozen": bool(self.root_frozen),
            "e_point": self.e_point,
            "e_reg": self.e_reg,
            "mre": self.mre,
        }


def write_hand_track(path, solutions: list[FrameSolution], first_frame: int = 0) -> None:
    write_jsonl(path, (s.to_record(first_frame + k) for k, s in enumerate(solutions)))


def freeze_occluded_dofs(
    visible: dict[MarkerID, bool] | set[MarkerID], hand: KinematicHand, bindings: BindingSet
) -> tuple[set[int], bool]:
    """DoFs of joints whose own and distal markers are all hidden; also whether the root is hidden.

    Returns ``(frozen phi indices, root_frozen)``. The root counts as hidden
    when no dorsum or palm marker is visible.
    """
    vis = {m for m, v in visible.items() if v} if isinstance(visible, dict) else set(visible)
    seen_joints = set()
    root_seen = False
    for mid, seg in zip(bindings.ids, bindings.segments):
        if mid in vis:
            seen_joints.add(hand.segment_joint[seg])
            root_seen |= seg in ROOT_SEGMENTS
    frozen: set[int] = set()
    for j, name in enumerate(JOINT_NAMES[1:], start=1):
        if not any(d in seen_joints for d in hand.descendants(j)):
            frozen.update(hand.joint_dofs(name))
    return frozen, not root_seen

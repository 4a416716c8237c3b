"""Triangle-mesh kernels shared by the hand model, the simulator and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest points on triangles (a, b, c) to points p, broadcasting over leading axes.

    Returns ``(closest, barycentric)``. Follows the region tests in Ericson,
    Real-Time Collision Detection, 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, a, b, c)))
    shape = p.shape[:-1]
    p, a, b, c = (x.reshape(-1, 3) for x in (p, a, b, c))
    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    m = (d1 <= 0) & (d2 <= 0)
    bary[m] = (1, 0, 0)
    done |= m

    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    m = ~done & (d3 >= 0) & (d4 <= d3)
    bary[m] = (0, 1, 0)
    done |= m

    vc = d1 * d4 - d3 * d2
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
    bary[m, 0] = 1 - v[m]
    bary[m, 1] = v[m]
    bary[m, 2] = 0
    done |= m

    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    m = ~done & (d6 >= 0) & (d5 <= d6)
    bary[m] = (0, 0, 1)
    done |= m

    vb = d5 * d2 - d1 * d6
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = d2 / (d2 - d6)
    bary[m, 0] = 1 - w[m]
    bary[m, 1] = 0
    bary[m, 2] = w[m]
    done |= m

    va = d3 * d6 - d5 * d4
    m = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    bary[m, 0] = 0
    bary[m, 1] = 1 - w[m]
    bary[m, 2] = w[m]
    done |= m

    m = ~done
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    bary[m, 0] = 1 - v[m] - w[m]
    bary[m, 1] = v[m]
    bary[m, 2] = w[m]

    q = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return q.reshape(shape + (3,)), bary.reshape(shape + (3,))


def closest_point_on_mesh(
    points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, tri_subset: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brute-force exact closest point of each query over (a subset of) triangles.

    Returns ``(triangle_index, barycentric, distance)``; ties go to the lowest
    triangle index.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tris = np.arange(len(faces)) if tri_subset is None else np.asarray(tri_subset)
    if len(tris) == 0:
        raise ValueError("empty triangle subset")
    F = faces[tris]
    a, b, c = vertices[F[:, 0]], vertices[F[:, 1]], vertices[F[:, 2]]
    out_tri = np.empty(len(points), dtype=int)
    out_bary = np.empty((len(points), 3))
    out_dist = np.empty(len(points))
    chunk = max(1, 200_000 // max(len(tris), 1))
    for s in range(0, len(points), chunk):
        P = points[s : s + chunk, None, :]
        q, bary = closest_point_on_triangles(P, a[None], b[None], c[None])
        d = np.linalg.norm(q - P, axis=-1)
        k = np.argmin(d, axis=1)
        rows = np.arange(len(k))
        out_tri[s : s + chunk] = tris[k]
        out_bary[s : s + chunk] = bary[rows, k]
        out_dist[s : s + chunk] = d[rows, k]
    return out_tri, out_bary, out_dist


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Broadcasting cross product over the last axis (cheaper than np.cross for small blocks)."""
    u0, u1, u2 = u[..., 0], u[..., 1], u[..., 2]
    v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([u1 * v2 - u2 * v1, u2 * v0 - u0 * v2, u0 * v1 - u1 * v0], axis=-1)


def _dot(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def ray_triangle_hits(
    origins: np.ndarray, directions: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray, eps: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Moller-Trumbore over broadcast rays/triangles. Returns ``(t, front_facing)``.

    ``t`` is +inf where there is no hit. ``front_facing`` is true where the ray
    travels against the triangle's winding normal, i.e. enters a closed,
    outward-oriented surface.
    """
    e1 = b - a
    e2 = c - a
    pvec = _cross(directions, e2)
    det = _dot(e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins - a
    u = _dot(tvec, pvec) * inv
    qvec = _cross(tvec, e1)
    v = _dot(directions, qvec) * inv
    t = _dot(e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf), det > 0


def winding_numbers(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Generalised winding number (van Oosterom-Strackee solid angles / 4 pi)."""
    points = np.atleast_2d(points)
    out = np.empty(len(points))
    V = vertices[faces]
    chunk = max(1, 400_000 // max(len(faces), 1))
    for s in range(0, len(points), chunk):
        P = points[s : s + chunk, None, None, :]
        r = V[None] - P
        ln = np.linalg.norm(r, axis=-1)
        a, b, c = r[..., 0, :], r[..., 1, :], r[..., 2, :]
        la, lb, lc = ln[..., 0], ln[..., 1], ln[..., 2]
        det = np.einsum("...i,...i->...", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("...i,...i->...", a, b) * lc
            + np.einsum("...i,...i->...", b, c) * la
            + np.einsum("...i,...i->...", c, a) * lb
        )
        out[s : s + chunk] = np.arctan2(det, den).sum(axis=1) / (2.0 * np.pi)
    return out


def is_watertight(faces: np.ndarray) -> bool:
    """Every undirected edge used by exactly two faces with opposite orientation."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed = {tuple(x) for x in e.tolist()}
    if len(directed) != len(e):
        return False
    return all((j, i) in directed for i, j in directed)


@dataclass
class MeshSDF:
    """Signed distance to a closed triangle mesh (negative inside).

    Candidate triangles are pruned with a KD-tree over bounding spheres, so
    only triangles whose sphere lies within the current upper bound are
    tested exactly.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int)
        if not is_watertight(self.faces):
            raise ValueError("mesh is not watertight")
        tri = self.vertices[self.faces]
        self._centers = tri.mean(axis=1)
        self._radii = np.linalg.norm(tri - self._centers[:, None], axis=-1).max(axis=1)
        self._rmax = float(self._radii.max())
        self._tree = cKDTree(self._centers)

    def unsigned(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        _, nearest = self._tree.query(points)
        F = self.faces[nearest]
        q, _ = closest_point_on_triangles(points, self.vertices[F[:, 0]], self.vertices[F[:, 1]], self.vertices[F[:, 2]])
        ub = np.linalg.norm(q - points, axis=1)
        out = np.empty(len(points))
        for i, p in enumerate(points):
            cand = np.asarray(self._tree.query_ball_point(p, ub[i] + self._rmax + 1e-12), dtype=int)
            cand = cand[np.linalg.norm(self._centers[cand] - p, axis=1) - self._radii[cand] <= ub[i] + 1e-12]
            _, _, d = closest_point_on_mesh(p[None], self.vertices, self.faces, np.sort(cand))
            out[i] = d[0]
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        d = self.unsigned(points)
        inside = winding_numbers(np.atleast_2d(points), self.vertices, self.faces) > 0.5
        return np.where(inside, -d, d)


@dataclass(frozen=True)
class SphereSDF:
    center: np.ndarray
    radius: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(points) - np.asarray(self.center), axis=1) - self.radius


def box_mesh(size: tuple[float, float, float], cell: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Closed, outward-wound box centred at the origin with subdivided faces."""
    size = np.asarray(size, dtype=float)
    half = size / 2
    verts: list[np.ndarray] = []
    faces: list[np.ndarray] = []
    index: dict[tuple, int] = {}

    def vid(p: np.ndarray) -> int:
        key = tuple(np.round(p / 1e-9).astype(np.int64))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            if sign < 0:
                u_ax, v_ax = v_ax, u_ax
            nu = max(1, int(np.ceil(size[u_ax] / cell)))
            nv = max(1, int(np.ceil(size[v_ax] / cell)))
            us = np.linspace(-half[u_ax], half[u_ax], nu + 1)
            vs = np.linspace(-half[v_ax], half[v_ax], nv + 1)
            ids = np.empty((nu + 1, nv + 1), dtype=int)
            for i, u in enumerate(us):
                for j, v in enumerate(vs):
                    p = np.zeros(3)
                    p[axis] = sign * half[axis]
                    p[u_ax] = u
                    p[v_ax] = v
                    ids[i, j] = vid(p)
            for i in range(nu):
                for j in range(nv):
                    a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
                    faces.append(np.array([a, b, c]))
                    faces.append(np.array([a, c, d]))
    V = np.array(verts)
    F = np.array(faces)
    # orient outward
    n = face_normals(V, F)
    centers = V[F].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, centers) < 0
    F[flip] = F[flip][:, ::-1]
    return V, F


def icosphere(radius: float = 1.0, subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11),
         (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    faces = [tuple(f) for f in F]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces, dtype=int)

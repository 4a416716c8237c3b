"""Edge-first assembly of detected corners into tagged blocks and global marker IDs.

The flow per (frame, camera) is: corners above the confidence threshold ->
nearby pairs scored by the edge classifier -> convex 4-cycles in the edge
graph -> tag/orientation reading per block -> patch-level voting -> corner IDs.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Protocol

import numpy as np
from scipy.spatial import cKDTree

from .marker_model import SIDE_OFFSETS, MarkerCodebook, MarkerID, PatchTemplate, TemplateSet, build_codebook
from .synth import canonical_cycle, quad_shape_ok


class AssemblyError(ValueError):
    pass


@dataclass
class AssemblyConfig:
    corner_threshold: float = 0.6
    edge_threshold: float = 0.75
    distance_threshold: float = 40.0
    max_side_ratio: float = 3.0
    min_angle_deg: float = 20.0
    exhaustive_radius_factor: float = 1.5

    def validate(self) -> None:
        for key in ("corner_threshold", "edge_threshold"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise AssemblyError(f"{key} must lie in [0, 1]")
        for key in ("distance_threshold", "max_side_ratio", "exhaustive_radius_factor"):
            if getattr(self, key) <= 0:
                raise AssemblyError(f"{key} must be positive")
        if not 0.0 <= self.min_angle_deg < 90.0:
            raise AssemblyError("min_angle_deg must lie in [0, 90)")


@dataclass(frozen=True)
class CornerCandidate:
    position: tuple[float, float]
    confidence: float


@dataclass(frozen=True)
class EdgeCandidate:
    endpoints: tuple[int, int]
    probability: float


@dataclass
class BlockCandidate:
    corners: tuple[int, int, int, int]
    tag: str | None = None
    orientation: int = 0
    tag_confidence: float = 0.0
    patch: str | None = None
    cell: tuple[int, int] | None = None


class BlockClassifier(Protocol):
    def __call__(self, corners: tuple[int, ...]) -> tuple[str, int, float]: ...


# ---------------------------------------------------------------------------
# thresholds and edges


def compute_distance_threshold(edge_length_samples: Iterable[float], quantile: float = 0.95) -> float:
    """Distance admitting ``quantile`` of the sampled true edge lengths."""
    x = np.asarray(list(edge_length_samples), dtype=float)
    if len(x) < 20:
        raise AssemblyError("too few edge length samples (need at least 20)")
    return float(np.quantile(x, quantile))


def filter_corners(corners: np.ndarray, conf: np.ndarray, threshold: float = 0.6) -> np.ndarray:
    """Indices of corners whose confidence clears ``threshold``."""
    return np.flatnonzero(np.asarray(conf) >= threshold)


def candidate_pairs(corners: np.ndarray, threshold: float, subset: np.ndarray | None = None) -> list[tuple[int, int]]:
    corners = np.asarray(corners, dtype=float).reshape(-1, 2)
    idx = np.arange(len(corners)) if subset is None else np.asarray(subset)
    if len(idx) < 2:
        return []
    pairs = cKDTree(corners[idx]).query_pairs(threshold, output_type="ndarray")
    out = [(int(idx[i]), int(idx[j])) for i, j in pairs]
    return sorted((min(a, b), max(a, b)) for a, b in out)


def propose_edges(
    corners: np.ndarray,
    threshold: float,
    classifier: Callable[[int, int], float],
    edge_threshold: float = 0.75,
    subset: np.ndarray | None = None,
) -> list[EdgeCandidate]:
    """Query every pair within ``threshold`` px and keep those with probability >= ``edge_threshold``."""
    out = []
    for i, j in candidate_pairs(corners, threshold, subset):
        p = float(classifier(i, j))
        if p >= edge_threshold:
            out.append(EdgeCandidate((i, j), p))
    return out


# ---------------------------------------------------------------------------
# blocks


def four_cycles(n_vertices_or_adj, edges: Iterable[tuple[int, int]] | None = None) -> list[tuple[int, int, int, int]]:
    """All 4-cycles ``(a, b, c, d)`` with ``a`` the smallest vertex and ``b < d``; each cycle once."""
    if edges is None:
        adj = n_vertices_or_adj
    else:
        adj: dict[int, set[int]] = {}
        for i, j in edges:
            if i == j:
                continue
            adj.setdefault(i, set()).add(j)
            adj.setdefault(j, set()).add(i)
    out = []
    for a in sorted(adj):
        nbrs = sorted(v for v in adj[a] if v > a)
        for b, d in combinations(nbrs, 2):
            for c in sorted((adj[b] & adj[d]) - {a}):
                if c > a:
                    out.append((a, b, c, d))
    return out


def assemble_blocks(
    corners: np.ndarray,
    edges: Iterable[EdgeCandidate | tuple[int, int]],
    max_side_ratio: float = 3.0,
    min_angle_deg: float = 20.0,
) -> list[BlockCandidate]:
    """Convex 4-cycles of the edge graph that pass the side-ratio and angle tests."""
    uv = np.asarray(corners, dtype=float).reshape(-1, 2)
    pairs = [e.endpoints if isinstance(e, EdgeCandidate) else tuple(e) for e in edges]
    out = []
    for cyc in four_cycles(None, pairs) if pairs else []:
        if quad_shape_ok(uv[list(cyc)], max_side_ratio, min_angle_deg):
            out.append(BlockCandidate(canonical_cycle(cyc, uv)))
    out.sort(key=lambda b: b.corners)
    return out


def identify_blocks(
    blocks: list[BlockCandidate], classifier: BlockClassifier, templates: TemplateSet
) -> list[BlockCandidate]:
    """Query each block once; drop blocks whose tag belongs to no template."""
    out = []
    for b in blocks:
        tag, orient, conf = classifier(b.corners)
        if tag not in templates:
            continue
        out.append(BlockCandidate(b.corners, tag, int(orient), float(conf)))
    return out


def template_order(block: BlockCandidate, printed_orientation: int = 0) -> tuple[int, int, int, int]:
    """Detection indices of template corners q0..q3 given the orientation reading."""
    k = (block.orientation - printed_orientation) // 90
    return tuple(block.corners[(n + k) % 4] for n in range(4))


def _side_between(order: tuple[int, ...], other: tuple[int, ...]) -> int | None:
    shared = set(order) & set(other)
    if len(shared) != 2:
        return None
    for s in range(4):
        if {order[s], order[(s + 1) % 4]} == shared:
            return s
    return None


def image_components(blocks: list[BlockCandidate], templates: TemplateSet) -> list[dict[int, tuple[int, int]]]:
    """Edge-sharing components with each block's grid offset from the component root."""
    orders = []
    for b in blocks:
        hyps = templates.hypotheses(b.tag) if b.tag else []
        printed = templates[hyps[0][0]].blocks[hyps[0][1]].orientation if hyps else 0
        orders.append(template_order(b, printed))
    by_corner: dict[int, list[int]] = {}
    for k, b in enumerate(blocks):
        for c in b.corners:
            by_corner.setdefault(c, []).append(k)
    seen = [False] * len(blocks)
    comps = []
    for root in range(len(blocks)):
        if seen[root]:
            continue
        offsets = {root: (0, 0)}
        seen[root] = True
        queue = deque([root])
        while queue:
            a = queue.popleft()
            cand = {k for c in blocks[a].corners for k in by_corner[c] if k != a}
            for nb in sorted(cand):
                if seen[nb]:
                    continue
                side = _side_between(orders[a], orders[nb])
                if side is None:
                    continue
                dr, dc = SIDE_OFFSETS[side]
                offsets[nb] = (offsets[a][0] + dr, offsets[a][1] + dc)
                seen[nb] = True
                queue.append(nb)
        comps.append(offsets)
    return comps


def vote_correct(blocks: list[BlockCandidate], templates: TemplateSet) -> list[BlockCandidate]:
    """Patch-level plurality vote on (patch, cell) using image adjacency.

    Every block in an edge-connected component votes, through its own tag
    hypothesis and the grid offset between the two blocks, for the cell of
    every other block, itself included. Ties keep the classifier's reading;
    a block whose tag stays ambiguous across patches is dropped.
    """
    out: list[BlockCandidate | None] = [None] * len(blocks)
    for comp in image_components(blocks, templates):
        members = sorted(comp)
        for x in members:
            votes: Counter = Counter()
            ox = comp[x]
            for y in members:
                oy = comp[y]
                for patch, cell in templates.hypotheses(blocks[y].tag):
                    target = (cell[0] + ox[0] - oy[0], cell[1] + ox[1] - oy[1])
                    if target in templates[patch].blocks:
                        votes[(patch, target)] += 1
            own = set(templates.hypotheses(blocks[x].tag))
            if not votes:
                continue
            top = max(votes.values())
            winners = sorted(k for k, v in votes.items() if v == top)
            if len(winners) == 1:
                choice = winners[0]
            else:
                kept = [w for w in winners if w in own]
                if len(kept) != 1:
                    continue
                choice = kept[0]
            patch, cell = choice
            b = blocks[x]
            out[x] = BlockCandidate(b.corners, templates[patch].blocks[cell].code, b.orientation, b.tag_confidence, patch, cell)
    return [b for b in out if b is not None]


def assign_corner_ids(blocks: list[BlockCandidate], templates: TemplateSet) -> dict[int, MarkerID]:
    """Detection corner index -> MarkerID; conflicting claims are dropped."""
    claims: dict[int, set[MarkerID]] = {}
    for b in blocks:
        if b.patch is None:
            hyps = templates.hypotheses(b.tag)
            if len(hyps) != 1:
                continue
            b = BlockCandidate(b.corners, b.tag, b.orientation, b.tag_confidence, *hyps[0])
        tpl = templates[b.patch]
        order = template_order(b, tpl.blocks[b.cell].orientation)
        for det, mid in zip(order, tpl.corner_ids(b.cell)):
            claims.setdefault(det, set()).add(mid)
    by_id: dict[MarkerID, set[int]] = {}
    for det, mids in claims.items():
        if len(mids) == 1:
            by_id.setdefault(next(iter(mids)), set()).add(det)
    return {next(iter(dets)): mid for mid, dets in by_id.items() if len(dets) == 1}


# ---------------------------------------------------------------------------
# driver


@dataclass
class AssemblyResult:
    ids: dict[int, MarkerID]
    blocks: list[BlockCandidate]
    raw_blocks: list[BlockCandidate] = field(default_factory=list)
    n_edges: int = 0
    n_pairs: int = 0

    def identified(self, corners: np.ndarray) -> list[tuple[MarkerID, np.ndarray]]:
        return sorted(((mid, np.asarray(corners[i])) for i, mid in self.ids.items()), key=lambda x: x[0])


def assemble_frame(
    corners: np.ndarray,
    conf: np.ndarray,
    edge_classifier: Callable[[int, int], float],
    block_classifier: BlockClassifier,
    templates: TemplateSet,
    config: AssemblyConfig | None = None,
    vote: bool = True,
) -> AssemblyResult:
    config = config or AssemblyConfig()
    keep = filter_corners(corners, conf, config.corner_threshold)
    pairs = candidate_pairs(corners, config.distance_threshold, keep)
    edges = [EdgeCandidate(p, pr) for p in pairs if (pr := float(edge_classifier(*p))) >= config.edge_threshold]
    raw = assemble_blocks(corners, edges, config.max_side_ratio, config.min_angle_deg)
    tagged = identify_blocks(raw, block_classifier, templates)
    final = vote_correct(tagged, templates) if vote else tagged
    return AssemblyResult(assign_corner_ids(final, templates), final, raw, len(edges), len(pairs))


def detection_classifiers(det, codebook: MarkerCodebook | None = None):
    """Adapters from a synthetic DetectionFrame to the classifier callables."""
    codebook = codebook or build_codebook()

    def block(corners):
        r = det.classify_block(corners, codebook)
        return r.tag, r.orient, r.conf

    return det.edge_probability, block


def assemble_detection(det, templates: TemplateSet, config: AssemblyConfig | None = None, vote: bool = True) -> AssemblyResult:
    edge, block = detection_classifiers(det)
    return assemble_frame(det.corners, det.conf, edge, block, templates, config, vote)


# ---------------------------------------------------------------------------
# candidate reduction


def _subset_is_quad(uv: np.ndarray, quad: tuple[int, int, int, int], max_side_ratio: float, min_angle_deg: float) -> bool:
    a, b, c, d = quad
    for cyc in ((a, b, c, d), (a, b, d, c), (a, c, b, d)):
        if quad_shape_ok(uv[list(cyc)], max_side_ratio, min_angle_deg):
            return True
    return False


def exhaustive_quads(
    corners: np.ndarray, radius: float | None = None, max_side_ratio: float = 3.0, min_angle_deg: float = 20.0
) -> int:
    """Count 4-subsets (all pairwise distances <= ``radius``) forming an acceptable quadrilateral."""
    uv = np.asarray(corners, dtype=float).reshape(-1, 2)
    n = len(uv)
    if n < 4:
        return 0
    if radius is None:
        adj = {i: set(range(n)) - {i} for i in range(n)}
    else:
        adj = {i: set() for i in range(n)}
        for i, j in cKDTree(uv).query_pairs(radius):
            adj[i].add(j)
            adj[j].add(i)
    count = 0
    for a in range(n):
        nb = sorted(v for v in adj[a] if v > a)
        for b, c, d in combinations(nb, 3):
            if c in adj[b] and d in adj[b] and d in adj[c]:
                count += _subset_is_quad(uv, (a, b, c, d), max_side_ratio, min_angle_deg)
    return count


@dataclass
class ReductionReport:
    exhaustive_quad_count: int
    edge_first_edge_count: int
    edge_first_block_count: int
    queried_pairs: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def candidate_reduction_report(
    corners: np.ndarray,
    edge_classifier: Callable[[int, int], float],
    config: AssemblyConfig | None = None,
    conf: np.ndarray | None = None,
) -> ReductionReport:
    config = config or AssemblyConfig()
    uv = np.asarray(corners, dtype=float).reshape(-1, 2)
    keep = np.arange(len(uv)) if conf is None else filter_corners(uv, conf, config.corner_threshold)
    pairs = candidate_pairs(uv, config.distance_threshold, keep)
    edges = [EdgeCandidate(p, pr) for p in pairs if (pr := float(edge_classifier(*p))) >= config.edge_threshold]
    blocks = assemble_blocks(uv, edges, config.max_side_ratio, config.min_angle_deg)
    n_exh = exhaustive_quads(
        uv[keep], config.exhaustive_radius_factor * config.distance_threshold, config.max_side_ratio, config.min_angle_deg
    )
    return ReductionReport(n_exh, len(edges), len(blocks), len(pairs))


def true_edge_lengths(det, templates: list[PatchTemplate]) -> list[float]:
    """Image lengths of lattice edges whose endpoints were both detected (needs ground truth)."""
    where = {mid: k for k, mid in enumerate(det.truth) if mid is not None}
    out = []
    for t in templates:
        for cell in t.blocks:
            ids = t.corner_ids(cell)
            for k in range(4):
                a, b = ids[k], ids[(k + 1) % 4]
                if a in where and b in where and (k < 2 or not t.has_cell((cell[0] + SIDE_OFFSETS[k][0], cell[1] + SIDE_OFFSETS[k][1]))):
                    out.append(float(np.linalg.norm(det.corners[where[a]] - det.corners[where[b]])))
    return out

"""Tag codebook, checkerboard patch templates and marker layouts.

A patch is a ``rows x cols`` grid of tagged blocks. Its corners form a
``(rows+1) x (cols+1)`` lattice; lattice point ``(i, j)`` has marker index
``i * (cols + 1) + j``. Block ``(r, c)`` has local corners, in template order,
``(r, c), (r, c+1), (r+1, c+1), (r+1, c)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from typing import TYPE_CHECKING, Iterable, NamedTuple

import numpy as np

from .mesh import closest_point_on_mesh

if TYPE_CHECKING:
    from .hand_model import KinematicHand

DEFAULT_ALPHABET = "ACEFHJKLMNPRTUWXY3"
ORIENTATIONS = (0, 90, 180, 270)

# (dr, dc) offsets of the neighbour across each template side 0..3
SIDE_OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1))
SIDE_NAMES = ("up", "right", "down", "left")


class LayoutError(ValueError):
    pass


class MarkerID(NamedTuple):
    patch: str
    index: int

    def to_dict(self) -> dict:
        return {"patch": self.patch, "index": int(self.index)}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerID":
        return cls(str(d["patch"]), int(d["index"]))


@dataclass(frozen=True)
class MarkerCodebook:
    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self) -> None:
        if len(set(self.alphabet)) != len(self.alphabet):
            raise LayoutError("alphabet characters must be unique")

    @property
    def capacity(self) -> int:
        return len(self.alphabet) ** 2

    def tag(self, index: int) -> str:
        n = len(self.alphabet)
        if not 0 <= index < self.capacity:
            raise IndexError(index)
        return self.alphabet[index // n] + self.alphabet[index % n]

    def index(self, tag: str) -> int:
        n = len(self.alphabet)
        return self.alphabet.index(tag[0]) * n + self.alphabet.index(tag[1])

    def tags(self) -> list[str]:
        return [self.tag(i) for i in range(self.capacity)]


def build_codebook(alphabet: str = DEFAULT_ALPHABET) -> MarkerCodebook:
    return MarkerCodebook(alphabet)


@dataclass(frozen=True)
class BlockTag:
    left: str
    right: str
    orientation: int = 0

    def __post_init__(self) -> None:
        if self.orientation not in ORIENTATIONS:
            raise LayoutError(f"orientation must be one of {ORIENTATIONS}")

    @property
    def code(self) -> str:
        return self.left + self.right

    @classmethod
    def from_code(cls, code: str, orientation: int = 0) -> "BlockTag":
        return cls(code[0], code[1], orientation)


@dataclass
class PatchTemplate:
    patch_id: str
    rows: int
    cols: int
    blocks: dict[tuple[int, int], BlockTag]
    segment: str = ""
    block_size: float = 0.006

    def __post_init__(self) -> None:
        codes = [b.code for b in self.blocks.values()]
        if len(set(codes)) != len(codes):
            raise LayoutError(f"patch {self.patch_id}: duplicate tags")
        self._by_code = {b.code: cell for cell, b in self.blocks.items()}

    @property
    def n_corners(self) -> int:
        return (self.rows + 1) * (self.cols + 1)

    @property
    def diagonal(self) -> float:
        return self.block_size * float(np.hypot(self.rows, self.cols))

    def corner_index(self, i: int, j: int) -> int:
        return i * (self.cols + 1) + j

    def block_corners(self, cell: tuple[int, int]) -> tuple[int, int, int, int]:
        r, c = cell
        return (
            self.corner_index(r, c),
            self.corner_index(r, c + 1),
            self.corner_index(r + 1, c + 1),
            self.corner_index(r + 1, c),
        )

    def corner_ids(self, cell: tuple[int, int]) -> tuple[MarkerID, ...]:
        return tuple(MarkerID(self.patch_id, k) for k in self.block_corners(cell))

    def cell_of(self, code: str) -> tuple[int, int] | None:
        return self._by_code.get(code)

    def has_cell(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

    @property
    def adjacency(self) -> dict[tuple[int, int], list[tuple[int, int]]]:
        out = {}
        for cell in self.blocks:
            out[cell] = [
                (cell[0] + dr, cell[1] + dc) for dr, dc in SIDE_OFFSETS if self.has_cell((cell[0] + dr, cell[1] + dc))
            ]
        return out

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "segment": self.segment,
            "grid": [self.rows, self.cols],
            "block_size": self.block_size,
            "blocks": [
                {"cell": [int(r), int(c)], "tag": t.code, "orient": t.orientation}
                for (r, c), t in sorted(self.blocks.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchTemplate":
        blocks = {tuple(b["cell"]): BlockTag.from_code(b["tag"], int(b.get("orient", 0))) for b in d["blocks"]}
        return cls(
            patch_id=d["patch_id"],
            rows=int(d["grid"][0]),
            cols=int(d["grid"][1]),
            blocks=blocks,
            segment=d.get("segment", ""),
            block_size=float(d.get("block_size", 0.006)),
        )


def adjacency_neighbors(template: PatchTemplate, block: BlockTag | str) -> list[tuple[BlockTag, str]]:
    """4-neighbourhood of a block with its relative direction (up/right/down/left)."""
    code = block.code if isinstance(block, BlockTag) else block
    cell = template.cell_of(code)
    if cell is None:
        raise LayoutError(f"block {code} is not part of patch {template.patch_id}")
    out = []
    for (dr, dc), name in zip(SIDE_OFFSETS, SIDE_NAMES):
        nb = (cell[0] + dr, cell[1] + dc)
        if nb in template.blocks:
            out.append((template.blocks[nb], name))
    return out


class TemplateSet:
    """All patch templates of a capture session, indexed by tag."""

    def __init__(self, templates: Iterable[PatchTemplate]):
        self.templates: dict[str, PatchTemplate] = {}
        self.by_code: dict[str, list[tuple[str, tuple[int, int]]]] = {}
        for t in templates:
            if t.patch_id in self.templates:
                raise LayoutError(f"duplicate patch id {t.patch_id}")
            self.templates[t.patch_id] = t
            for cell, tag in t.blocks.items():
                self.by_code.setdefault(tag.code, []).append((t.patch_id, cell))

    def __contains__(self, code: str) -> bool:
        return code in self.by_code

    def __getitem__(self, patch_id: str) -> PatchTemplate:
        return self.templates[patch_id]

    def __iter__(self):
        return iter(self.templates.values())

    def __len__(self) -> int:
        return len(self.templates)

    def hypotheses(self, code: str) -> list[tuple[str, tuple[int, int]]]:
        return self.by_code.get(code, [])


@dataclass
class MarkerLayout:
    """MarkerID -> (attachment, local position in the segment/object frame)."""

    entries: dict[MarkerID, tuple[str, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[MarkerID]:
        return list(self.entries)

    def attachment(self, mid: MarkerID) -> str:
        return self.entries[mid][0]

    def position(self, mid: MarkerID) -> np.ndarray:
        return self.entries[mid][1]

    def by_attachment(self) -> dict[str, list[MarkerID]]:
        out: dict[str, list[MarkerID]] = {}
        for mid, (att, _) in self.entries.items():
            out.setdefault(att, []).append(mid)
        return out

    def merged(self, other: "MarkerLayout") -> "MarkerLayout":
        clash = set(self.entries) & set(other.entries)
        if clash:
            raise LayoutError(f"marker ids appear twice: {sorted(clash)[:3]}")
        return MarkerLayout({**self.entries, **other.entries})


class SessionLayout(NamedTuple):
    templates: list[PatchTemplate]
    layout: MarkerLayout


def layout_to_dict(templates: list[PatchTemplate], layout: MarkerLayout) -> dict:
    return {
        "patches": [t.to_dict() for t in templates],
        "markers": [
            {"id": mid.to_dict(), "attachment": att, "local_pos": [float(v) for v in pos]}
            for mid, (att, pos) in sorted(layout.entries.items())
        ],
    }


def layout_from_dict(d: dict) -> SessionLayout:
    templates = [PatchTemplate.from_dict(p) for p in d["patches"]]
    layout = MarkerLayout(
        {MarkerID.from_dict(m["id"]): (m["attachment"], np.asarray(m["local_pos"], dtype=float)) for m in d["markers"]}
    )
    return SessionLayout(templates, layout)


def save_layout(path, templates: list[PatchTemplate], layout: MarkerLayout) -> None:
    with open(path, "w") as fh:
        json.dump(layout_to_dict(templates, layout), fh, indent=1, sort_keys=True)


def load_layout(path) -> SessionLayout:
    with open(path) as fh:
        return layout_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# tag allocation


_TAG_ORDER_SEED = 20240611


def tag_sequence(codebook: MarkerCodebook) -> list[str]:
    """Fixed pseudo-random tag order; consecutive patches draw from it in turn."""
    perm = np.random.default_rng(_TAG_ORDER_SEED).permutation(codebook.capacity)
    return [codebook.tag(int(k)) for k in perm]


def allocate_patches(
    specs: list[tuple[str, str, int, int, float]], codebook: MarkerCodebook, start: int = 0
) -> tuple[list[PatchTemplate], int]:
    """Create templates from ``(patch_id, segment, rows, cols, block_size)`` specs.

    Tags are drawn cyclically from :func:`tag_sequence` beginning at ``start``;
    returns the templates and the next free position.
    """
    seq = tag_sequence(codebook)
    pos = start
    out = []
    for pid, seg, rows, cols, size in specs:
        if rows * cols > codebook.capacity:
            raise LayoutError(f"patch {pid}: {rows * cols} blocks exceed codebook capacity {codebook.capacity}")
        blocks = {}
        for r, c in product(range(rows), range(cols)):
            blocks[(r, c)] = BlockTag.from_code(seq[pos % len(seq)])
            pos += 1
        out.append(PatchTemplate(pid, rows, cols, blocks, segment=seg, block_size=size))
    return out, pos


# ---------------------------------------------------------------------------
# hand layout

# rows along the bone x cols around it, for proximal/middle/distal phalanges
PHALANX_GRIDS = {
    "thumb": ((6, 3), (4, 3), (3, 3)),
    "index": ((6, 3), (3, 3), (2, 3)),
    "middle": ((7, 3), (4, 3), (2, 3)),
    "ring": ((6, 3), (4, 3), (2, 3)),
    "little": ((5, 3), (3, 3), (2, 3)),
}
PHALANX_BLOCK = 0.006
PALM_BLOCK = 0.008
# patch id, segment, rows, cols, lateral centre (m)
PALM_PATCHES = (
    ("dorsum_a", "dorsum", 10, 4, 0.0175),
    ("dorsum_b", "dorsum", 10, 4, -0.0175),
    ("palm_a", "palm", 11, 3, 0.0120),
    ("palm_b", "palm", 11, 3, -0.0130),
)


def hand_patch_specs(side: str = "R") -> list[tuple[str, str, int, int, float]]:
    specs = []
    for finger, grids in PHALANX_GRIDS.items():
        for part, (rows, cols) in zip(("proximal", "middle", "distal"), grids):
            seg = f"{finger}_{part}"
            specs.append((f"{side}_{seg}", seg, rows, cols, PHALANX_BLOCK))
    for pid, seg, rows, cols, _ in PALM_PATCHES:
        specs.append((f"{side}_{pid}", seg, rows, cols, PALM_BLOCK))
    return specs


# patch centre as a fraction of bone length; the thumb base sits against the palm
PATCH_CENTER_FRACTION = {"thumb_proximal": 0.58}


def _phalanx_lattice(rows: int, cols: int, s: float, length: float, radius: float, center: float = 0.5) -> np.ndarray:
    """Lattice wrapped around a segment's dorsal side, in segment coordinates."""
    pts = np.empty((rows + 1, cols + 1, 3))
    for i in range(rows + 1):
        x = center * length + (i - rows / 2) * s
        for j in range(cols + 1):
            phi = (j - cols / 2) * s / radius
            pts[i, j] = (x, radius * np.sin(phi), radius * np.cos(phi))
    return pts.reshape(-1, 3)


def _flat_lattice(rows: int, cols: int, s: float, center: np.ndarray, e_row: np.ndarray, e_col: np.ndarray) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(rows + 1) - rows / 2, np.arange(cols + 1) - cols / 2, indexing="ij")
    return (center + ii[..., None] * s * e_row + jj[..., None] * s * e_col).reshape(-1, 3)


def build_hand_layout(
    hand: "KinematicHand", codebook: MarkerCodebook | None = None, side: str = "R", tag_start: int = 0
) -> tuple[list[PatchTemplate], MarkerLayout]:
    """19 patches on the rest-pose hand; marker positions lie on segment surfaces."""
    codebook = codebook or build_codebook()
    templates, _ = allocate_patches(hand_patch_specs(side), codebook, start=tag_start)
    V = hand.rest_vertices()
    entries: dict[MarkerID, tuple[str, np.ndarray]] = {}
    palm_geom = hand.palm_box()
    for tpl in templates:
        seg = tpl.segment
        joint = hand.segment_joint[seg]
        Q = hand.rest_frames[joint]
        J = hand.rest_joints()[joint]
        if seg in ("dorsum", "palm"):
            lo, hi = palm_geom
            cx = 0.5 * (lo[0] + hi[0])
            lat = next(p[4] for p in PALM_PATCHES if tpl.patch_id.endswith(p[0]))
            if seg == "dorsum":
                center = np.array([cx, lat, hi[2]])
                e_col = np.array([0.0, 1.0, 0.0])
            else:
                center = np.array([cx, lat, lo[2]])
                e_col = np.array([0.0, -1.0, 0.0])
            local = _flat_lattice(tpl.rows, tpl.cols, tpl.block_size, center, np.array([1.0, 0, 0]), e_col)
        else:
            length = hand.segment_length(seg)
            radius = hand.segment_radius(seg)
            frac = PATCH_CENTER_FRACTION.get(seg, 0.5)
            local = _phalanx_lattice(tpl.rows, tpl.cols, tpl.block_size, length, radius, frac)
        world = local @ Q.T + J
        tris = hand.segment_triangles[seg]
        tri, bary, _ = closest_point_on_mesh(world, V, hand.faces, tris)
        on_surface = np.einsum("nk,nkd->nd", bary, V[hand.faces[tri]])
        local_snapped = (on_surface - J) @ Q
        for k in range(tpl.n_corners):
            entries[MarkerID(tpl.patch_id, k)] = (seg, local_snapped[k])
    return templates, MarkerLayout(entries)


def build_box_layout(
    name: str,
    size: tuple[float, float, float],
    grid: tuple[int, int] = (2, 4),
    block_size: float = 0.008,
    codebook: MarkerCodebook | None = None,
    tag_start: int = 0,
) -> tuple[list[PatchTemplate], MarkerLayout, int]:
    """One centred patch per face of an axis-aligned box (object frame at its centre)."""
    codebook = codebook or build_codebook()
    half = np.asarray(size, dtype=float) / 2
    specs = []
    frames = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            n = np.zeros(3)
            n[axis] = sign
            # longest in-face axis carries the rows
            in_face = sorted((a for a in range(3) if a != axis), key=lambda a: -half[a])
            e_row = np.zeros(3)
            e_row[in_face[0]] = 1.0
            e_col = np.cross(n, e_row)  # e_col x e_row = -n
            rows, cols = grid
            if rows * block_size > 2 * half[in_face[0]] or cols * block_size > 2 * half[in_face[1]]:
                rows = max(1, min(rows, int(2 * half[in_face[0]] // block_size)))
                cols = max(1, min(cols, int(2 * half[in_face[1]] // block_size)))
            face = "xyz"[axis] + ("+" if sign > 0 else "-")
            specs.append((f"{name}_{face}", name, rows, cols, block_size))
            frames.append((n * half[axis], e_row, e_col))
    templates, nxt = allocate_patches(specs, codebook, start=tag_start)
    entries = {}
    for tpl, (center, e_row, e_col) in zip(templates, frames):
        pts = _flat_lattice(tpl.rows, tpl.cols, tpl.block_size, center, e_row, e_col)
        for k, p in enumerate(pts):
            entries[MarkerID(tpl.patch_id, k)] = (name, p)
    return templates, MarkerLayout(entries), nxt

"""Ground-truth oracles shared by the unit and acceptance tests."""

from __future__ import annotations

from markercap.marker_model import TemplateSet


def identifiable_blocks(det, templates: TemplateSet) -> set[frozenset]:
    """Ground-truth blocks that a single image can name unambiguously.

    A block is identifiable when its tag is unique across the session, or when
    it shares an edge with another visible block of its patch (the neighbour
    pins down which patch it belongs to). Built from the simulator's truth
    labels only, independently of the assembly code.
    """
    blocks = list(det.blocks)
    out = set()
    for b in blocks:
        tag = det.blocks[b].tag
        if len(templates.hypotheses(tag)) == 1 or any(len(b & o) == 2 for o in blocks if o is not b):
            out.add(b)
    return out


def identifiable_ids(det, templates: TemplateSet) -> dict:
    return {k: det.truth[k] for blk in identifiable_blocks(det, templates) for k in blk}

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from markercap.marker_model import (
    BlockTag,
    LayoutError,
    MarkerCodebook,
    MarkerID,
    MarkerLayout,
    PatchTemplate,
    TemplateSet,
    adjacency_neighbors,
    allocate_patches,
    build_box_layout,
    build_codebook,
    load_layout,
    save_layout,
)
from markercap.mesh import closest_point_on_mesh

CB = build_codebook()


@given(st.integers(0, CB.capacity - 1))
def test_codebook_index_roundtrip(i):
    assert CB.index(CB.tag(i)) == i


def test_codebook_rejects_duplicate_alphabet():
    with pytest.raises(LayoutError):
        MarkerCodebook("AAB")


def test_codebook_tags_are_unique():
    assert len(set(CB.tags())) == CB.capacity == 324


def test_block_tag_orientation_validated():
    assert BlockTag.from_code("AC", 90).code == "AC"
    with pytest.raises(LayoutError):
        BlockTag("A", "C", 45)


def test_template_rejects_duplicate_tags():
    with pytest.raises(LayoutError):
        PatchTemplate("p", 1, 2, {(0, 0): BlockTag("A", "C"), (0, 1): BlockTag("A", "C")})


def test_template_corners_and_adjacency():
    (tpl,), _ = allocate_patches([("p", "seg", 2, 3, 0.006)], CB)
    assert tpl.n_corners == 12
    assert tpl.block_corners((1, 2)) == (6, 7, 11, 10)
    adj = tpl.adjacency
    for cell, nbs in adj.items():
        for nb in nbs:
            assert cell in adj[nb]
    names = {d for _, d in adjacency_neighbors(tpl, tpl.blocks[(0, 0)])}
    assert names == {"right", "down"}
    with pytest.raises(LayoutError):
        adjacency_neighbors(tpl, "ZZ")
    assert PatchTemplate.from_dict(tpl.to_dict()).to_dict() == tpl.to_dict()


def test_allocation_rejects_oversized_patch():
    with pytest.raises(LayoutError):
        allocate_patches([("p", "seg", 20, 20, 0.006)], CB)


def test_template_set_hypotheses_and_duplicate_ids():
    tpls, _ = allocate_patches([("a", "s", 2, 2, 0.006), ("b", "s", 2, 2, 0.006)], CB)
    ts = TemplateSet(tpls)
    code = tpls[1].blocks[(1, 0)].code
    assert ("b", (1, 0)) in ts.hypotheses(code)
    assert ts.hypotheses("??") == []
    with pytest.raises(LayoutError):
        TemplateSet([tpls[0], tpls[0]])


def test_hand_layout_counts_and_unique_tags(hand_layout):
    tpls, layout = hand_layout
    assert len(tpls) == 19
    assert sum(t.n_corners for t in tpls) == len(layout) == 502
    codes = [b.code for t in tpls for b in t.blocks.values()]
    assert len(codes) == 323 and len(set(codes)) == 323


def test_hand_markers_lie_on_their_segment(hand, hand_layout):
    _, layout = hand_layout
    V = hand.rest_vertices()
    J = hand.rest_joints()
    for seg, mids in layout.by_attachment().items():
        j = hand.segment_joint[seg]
        world = np.array([layout.position(m) for m in mids]) @ hand.rest_frames[j].T + J[j]
        _, _, d = closest_point_on_mesh(world, V, hand.faces, hand.segment_triangles[seg])
        assert d.max() < 1e-9


def test_box_layout_does_not_collide_with_hand_tags(hand_layout):
    tpls, layout = hand_layout
    btpl, blayout, nxt = build_box_layout("box", (0.15, 0.04, 0.04), tag_start=323)
    TemplateSet(tpls + btpl)
    merged = layout.merged(blayout)
    assert len(merged) == len(layout) + len(blayout)
    with pytest.raises(LayoutError):
        layout.merged(layout)
    assert nxt > 323


def test_layout_file_roundtrip(tmp_path, hand_layout):
    tpls, layout = hand_layout
    save_layout(tmp_path / "layout.json", tpls, layout)
    t2, l2 = load_layout(tmp_path / "layout.json")
    assert [t.to_dict() for t in t2] == [t.to_dict() for t in tpls]
    for mid in layout.ids():
        assert l2.attachment(mid) == layout.attachment(mid)
        np.testing.assert_array_equal(l2.position(mid), layout.position(mid))


def test_marker_id_dict_roundtrip():
    m = MarkerID("R_index_distal", 7)
    assert MarkerID.from_dict(m.to_dict()) == m
    assert isinstance(MarkerLayout().ids(), list)

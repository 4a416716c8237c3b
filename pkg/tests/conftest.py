from __future__ import annotations

import numpy as np
import pytest

from markercap.geometry import CameraModel


def look_at_camera(cid: str, center, target=(0.0, 0.0, 0.0), f: float = 1500.0, size=(1280, 1024)) -> CameraModel:
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.95 else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraModel(cid, size[0], size[1], f, f, size[0] / 2, size[1] / 2, R, -R @ center)


@pytest.fixture
def ring_cameras() -> list[CameraModel]:
    cams = []
    for k in range(6):
        a = 2 * np.pi * k / 6
        cams.append(look_at_camera(f"c{k}", (1.5 * np.cos(a), 1.5 * np.sin(a), 0.8 + 0.2 * (k % 2))))
    return cams


@pytest.fixture(scope="session")
def hand():
    from markercap.hand_model import KinematicHand

    return KinematicHand()


@pytest.fixture(scope="session")
def hand_layout(hand):
    from markercap.marker_model import build_hand_layout

    return build_hand_layout(hand)


@pytest.fixture(scope="session")
def rig():
    from markercap.synth import synth_rig

    return synth_rig()


@pytest.fixture(scope="session")
def hand_object_scene(hand, hand_layout, rig):
    """A short hand-plus-box scene: (all templates, renderer, rendered frames)."""
    from markercap.synth import SceneRenderer, box_object, motion_script, object_script_following

    templates, layout = hand_layout
    obj = box_object("box", tag_start=323)
    renderer = SceneRenderer(hand, layout, rig, obj=obj)
    poses = motion_script(60, hand)
    objp = object_script_following(poses)
    frames = [renderer.frame(k, poses[k], objp[k]) for k in range(0, 60, 20)]
    return templates + obj.templates, renderer, frames

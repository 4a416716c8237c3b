from __future__ import annotations

import json
import shutil

import pytest
import yaml

from markercap.cli import EXIT_CLAIM, EXIT_DEPENDENCY, EXIT_VALIDATION, build_parser, diff_moves, main
from markercap.config import ConfigError, default_config, load_config
from markercap.io import Manifest, read_json, write_json

TINY = {
    "seed": 5,
    "synth": {
        "noise": {
            "corner_miss_rate": 0.0,
            "false_positives_per_frame": 0.0,
            "localization_sigma": 0.0,
            "edge_error_rate": 0.0,
            "tag_mislabel_rate": 0.0,
        },
        "scene": {"calibration_frames": 2, "motion_frames": 8},
        "cube": {"moves": "R U'", "frames_per_turn": 12},
    },
}


def write_tiny_config(path) -> str:
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_tiny_config(root / "tiny.yaml")
    out = root / "run"
    assert main(["--config", cfg, "--out", str(out), "--log-level", "WARNING", "pipeline", "--with-synth"]) == 0
    assert main(["--config", cfg, "--out", str(out), "--log-level", "WARNING", "eval"]) == 0
    return cfg, out


def test_config_defaults_and_validation(tmp_path):
    cfg = load_config()
    assert cfg.rig.camera_count == 13 and cfg.seed == 0
    assert cfg.section("filter") == {"enabled": True, "cutoff_hz": 5.0, "order": 2}
    for override, key in [
        ({"synth": {"noise": {"corner_miss_rate": 2.0}}}, "corner_miss_rate"),
        ({"synth": {"scene": {"nonsense": 1}}}, "synth.scene.nonsense"),
        ({"solver": {"epochs": "many"}}, "solver.epochs"),
        ({"rubik": {"tau_co": 0.01}}, "rubik"),
        ({"filter": {"cutoff_hz": 12.0}}, "filter.cutoff_hz"),
    ]:
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            load_config(overrides=override)
    p = tmp_path / "c.yaml"
    p.write_text("- not a mapping\n")
    with pytest.raises(ConfigError):
        load_config(p)
    assert set(default_config()) >= {"synth", "assembly", "reconstruct", "solver", "rubik", "filter", "metrics", "eval"}


def test_parser_accepts_globals_on_either_side(tmp_path):
    p = build_parser()
    a = p.parse_args(["--out", str(tmp_path), "--seed", "3", "synth"])
    b = p.parse_args(["synth", "--out", str(tmp_path), "--seed", "3"])
    assert a.out == b.out == tmp_path and a.seed == b.seed == 3
    f = p.parse_args(["filter", "--cutoff-hz", "4", "--filter-order", "3", "--no-filter"])
    assert (f.cutoff_hz, f.filter_order, f.no_filter) == (4.0, 3, True)


def test_invalid_config_exits_with_validation_code(tmp_path, caplog):
    bad = tmp_path / "bad.yaml"
    bad.write_text("synth: {noise: {corner_miss_rate: 2.0}}\n")
    assert main(["--config", str(bad), "--out", str(tmp_path / "r"), "synth"]) == EXIT_VALIDATION
    assert "corner_miss_rate" in caplog.text
    assert main(["--out", str(tmp_path / "r"), "--threads", "0", "synth"]) == EXIT_VALIDATION


def test_pipeline_outputs_and_zero_noise_accuracy(tiny_run):
    _, out = tiny_run
    for name in ("rig.json", "identified.jsonl", "markers3d.jsonl", "bindings.json", "hand_track.jsonl", "hand_track_filtered.jsonl", "object_track.jsonl", "moves.json", "metrics.json", "eval.json"):
        assert (out / name).exists(), name
    assert len(read_json(out / "rig.json")["cameras"]) == 13
    metrics = read_json(out / "metrics.json")
    assert metrics["mre_mm"]["mean"] < 0.1
    assert "package-defined" in metrics["provenance"]["diversity"]
    report = read_json(out / "eval.json")
    assert all(report["claims"].values()) and set(report["claims"]) == {"pose", "mre", "object", "moves"}
    assert "frozen_phi_err_deg" in report["hand"]
    assert report["tolerances"]["mre_mm"] == 0.1
    manifest = read_json(out / "manifest.json")
    assert [s["stage"] for s in manifest["stages"]][:2] == ["synth", "assemble"]
    assert manifest["header"]["seed"] == 5


def test_stage_rerun_is_byte_identical(tiny_run):
    cfg, out = tiny_run
    before = {n: (out / n).read_bytes() for n in ("markers3d.jsonl", "moves.json", "object_track.jsonl")}
    head = read_json(out / "manifest.json")["head"]
    assert main(["--config", cfg, "--out", str(out), "--log-level", "WARNING", "pipeline", "--stages", "triangulate,object,rubik"]) == 0
    assert all((out / n).read_bytes() == b for n, b in before.items())
    # re-running the later stages restores the original chain head
    assert main(["--config", cfg, "--out", str(out), "--log-level", "WARNING", "pipeline", "--stages", "calibrate,solve,filter,metrics"]) == 0
    assert main(["--config", cfg, "--out", str(out), "--log-level", "WARNING", "eval"]) == 0
    assert read_json(out / "manifest.json")["head"] == head


def test_solve_before_calibrate_is_a_dependency_error(tiny_run, tmp_path, caplog):
    cfg, out = tiny_run
    for name in ("session.json", "layout.json", "markers3d.jsonl"):
        shutil.copy(out / name, tmp_path / name)
    assert main(["--config", cfg, "--out", str(tmp_path), "solve"]) == EXIT_DEPENDENCY
    assert "stage solve requires output of stage calibrate" in caplog.text
    assert main(["--config", cfg, "--out", str(tmp_path / "empty"), "assemble"]) == EXIT_DEPENDENCY


def test_eval_rejects_mismatched_frame_counts(tiny_run, tmp_path):
    cfg, out = tiny_run
    for name in ("ground_truth.jsonl", "hand_track.jsonl"):
        shutil.copy(out / name, tmp_path / name)
    lines = (tmp_path / "hand_track.jsonl").read_text().splitlines()
    (tmp_path / "hand_track.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    assert main(["--config", cfg, "--out", str(tmp_path), "eval"]) == EXIT_VALIDATION


def test_eval_failed_claim_exits_nonzero(tiny_run, tmp_path):
    cfg, out = tiny_run
    run = tmp_path / "run"
    shutil.copytree(out, run)
    write_json(run / "moves.json", read_json(run / "moves.json")[:-1])
    assert main(["--config", cfg, "--out", str(run), "--log-level", "WARNING", "eval"]) == EXIT_CLAIM
    report = read_json(run / "eval.json")
    assert not report["claims"]["moves"] and report["claims"]["mre"]


def test_move_diff_names_frame_and_face():
    expected = [{"frame": 40, "face": "R", "dir": -1}, {"frame": 80, "face": "U", "dir": -1}, {"frame": 120, "face": "R", "dir": 1}]
    assert diff_moves(expected, expected, 5) == []
    got = [dict(m) for m in expected]
    got[1] = {"frame": 81, "face": "F", "dir": -1}
    diff = diff_moves(expected, got, 5)
    assert {(d["op"], d["frame"], d["face"]) for d in diff} == {("replaced", 80, "U"), ("replacement", 81, "F")}
    late = [dict(m) for m in expected]
    late[2]["frame"] = 130
    assert diff_moves(expected, late, 5) == [{"op": "late", "index": 2, "frame": 130, "face": "R", "expected_frame": 120}]
    assert diff_moves(expected, expected[:2], 5)[0]["op"] == "missing"


def test_manifest_chain(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("1")
    b.write_text("2")
    m = Manifest(["one", "two"], {"seed": 0})
    m.record("one", [], [a])
    m.record("two", [a], [b])
    head = m.head
    m.save(tmp_path / "m.json")
    assert Manifest.load(tmp_path / "m.json", ["one", "two"]).head == head
    a.write_text("changed")
    m.record("one", [], [a])
    assert m.head != head  # an upstream change propagates to the head
    with pytest.raises(ValueError):
        m.record("three", [], [])
    write_json(tmp_path / "x.json", {"b": 1, "a": [1.5]})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": [1.5], "b": 1}

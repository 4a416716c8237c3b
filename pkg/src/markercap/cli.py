"""Command-line driver: synthetic bundles, pipeline stages, metrics and evaluation.

Each stage reads the files of earlier stages from the run directory and
writes its own; ``manifest.json`` chains the content hashes of every
stage's inputs and outputs so a rerun with the same seed and configuration
can be checked byte for byte.
"""

from __future__ import annotations

import argparse
import difflib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .assembly import AssemblyConfig, assemble_detection
from .config import ConfigError, PipelineConfig, load_config
from .geometry import CameraModel, GeometryError, RigidTransform, rotation_log
from .hand_model import HandPose, KinematicHand
from .hand_solver import HandSolver, SolverError, load_bindings, save_bindings, write_hand_track
from .io import Manifest, iter_jsonl, read_json, read_jsonl, write_json, write_jsonl
from .marker_model import MarkerID, MarkerLayout, TemplateSet, build_codebook, build_hand_layout, load_layout, save_layout
from .mesh import MeshSDF
from .metrics import diversity_coherence, jerk, mre, msnr, penetration, pose_features, summary, velocities
from .object_solver import RigidObjectModel, marker_fit_residuals, write_object_track
from .postprocess import FilterError, filter_hand_records, filter_rigid_records
from .reconstruct3d import MarkerObservation, cleanup_tracks, patch_cluster_filter, triangulate_frame
from .rubik import RubikError, parse_moves, reconstruct_sequence, write_rubik_outputs
from .synth import (
    DetectionFrame,
    DetectionSimulator,
    SceneRenderer,
    box_object,
    calibration_script,
    cube_marker_track,
    edge_length_bound,
    motion_script,
    object_script_following,
    synth_rig,
)

log = logging.getLogger("markercap")

STAGES = ("synth", "assemble", "triangulate", "calibrate", "solve", "object", "rubik", "filter", "metrics", "eval")
PIPELINE_STAGES = STAGES[1:-1]
EXIT_CLAIM, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERICAL = 1, 2, 3, 4
OBJECT_NAME = "box"


class StageDependencyError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run directory


def _versions() -> dict:
    out = {}
    for pkg in ("markercap", "numpy", "scipy", "jax", "scikit-learn"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


@dataclass
class Run:
    out: Path
    cfg: PipelineConfig
    threads: int = 1

    def __post_init__(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        header = {"seed": self.cfg.seed, "config": self.cfg.raw, "versions": _versions()}
        mpath = self.out / "manifest.json"
        self.manifest = Manifest.load(mpath, STAGES) if mpath.exists() else Manifest(STAGES)
        self.manifest.header = header

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, stage: str, producer: str, *names: str) -> list[Path]:
        paths = [self.path(n) for n in names]
        missing = [p.name for p in paths if not p.exists()]
        if missing:
            raise StageDependencyError(f"stage {stage} requires output of stage {producer} (missing {', '.join(missing)})")
        return paths

    def record(self, stage: str, inputs: Iterable[Path], outputs: Iterable[Path], params: dict | None = None) -> None:
        h = self.manifest.record(stage, inputs, outputs, params)
        self.manifest.save(self.path("manifest.json"))
        log.info("%s: wrote %s (hash %s)", stage, ", ".join(Path(p).name for p in outputs) or "nothing", h[:12])

    def map(self, fn: Callable, items: list) -> list:
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


def _session(run: Run, stage: str) -> dict:
    return read_json(run.require(stage, "synth", "session.json")[0])


def _segment(session: dict, name: str) -> dict | None:
    return next((s for s in session["segments"] if s["name"] == name), None)


def _cameras(path: Path) -> list[CameraModel]:
    return [CameraModel.from_dict(c) for c in read_json(path)["cameras"]]


def _pose_record(p: HandPose) -> dict:
    return {"t": p.t.tolist(), "o6": p.o6.tolist(), "phi": p.phi.tolist()}


def _rigid_record(T: RigidTransform | None) -> dict | None:
    return None if T is None else {"R": T.rotation.ravel().tolist(), "t": T.translation.tolist()}


def _rigid_from(rec: dict | None) -> RigidTransform | None:
    if rec is None or rec.get("R") is None:
        return None
    return RigidTransform(np.reshape(rec["R"], (3, 3)), np.asarray(rec["t"], dtype=float))


# ---------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> None:
    cfg = run.cfg
    scene = cfg.section("synth.scene")
    hand = KinematicHand()
    templates, hand_layout = build_hand_layout(hand)
    cameras = synth_rig(cfg.rig)
    n_cal, n_mot = scene["calibration_frames"], scene["motion_frames"]
    fr = cfg.rig.frame_rate
    cal = calibration_script(n_cal, fr)
    mot = motion_script(n_mot, hand, fr, amplitude=scene["motion_amplitude"], seed=cfg.seed)
    poses = cal + mot
    obj = None
    obj_poses: list[RigidTransform | None] = [None] * len(poses)
    if scene["object"]:
        n_tags = sum(len(t.blocks) for t in templates) % build_codebook().capacity
        obj = box_object(OBJECT_NAME, tuple(scene["object_size"]), tuple(scene["object_grid"]), scene["object_block_size"], tag_start=n_tags)
        obj_poses = [None] * n_cal + object_script_following(mot)
    all_templates = templates + (obj.templates if obj else [])
    layout = hand_layout.merged(obj.layout) if obj else hand_layout
    renderer = SceneRenderer(hand, hand_layout, cameras, obj=obj)
    sim = DetectionSimulator(all_templates, cfg.noise)

    gt, dets = [], []
    reach = 0.0
    for k, pose in enumerate(poses):
        sf = renderer.frame(k, pose, obj_poses[k])
        reach = max(reach, float(np.linalg.norm(sf.marker_positions - np.asarray(cfg.rig.target), axis=1).max()))
        gt.append({"frame": k, "segment": "calibration" if k < n_cal else "motion", "hand": _pose_record(pose), "object": _rigid_record(obj_poses[k])})
        for c, cam in enumerate(cameras):
            dets.append(sim.render(k, c, cam, sf.marker_ids, sf.uv[c], sf.visible_views[c]).to_record())

    edge_bound = edge_length_bound(cameras, max(t.block_size for t in all_templates), reach, cfg.rig.target)

    outputs = [run.path(n) for n in ("rig.json", "layout.json", "session.json", "ground_truth.jsonl", "detections.jsonl")]
    write_json(outputs[0], {"cameras": [c.to_dict() for c in cameras], "frame_rate": fr, "edge_length_bound_px": edge_bound})
    save_layout(outputs[1], all_templates, layout)
    write_json(
        outputs[2],
        {
            "frame_rate": fr,
            "n_frames": len(poses),
            "object": OBJECT_NAME if obj else None,
            "segments": [
                {"name": "calibration", "start": 0, "stop": n_cal, "continuous": False},
                {"name": "motion", "start": n_cal, "stop": n_cal + n_mot, "continuous": True},
            ],
        },
    )
    write_jsonl(outputs[3], gt)
    write_jsonl(outputs[4], dets)
    if obj:
        model = RigidObjectModel.from_layout(OBJECT_NAME, obj.layout, obj.vertices, obj.faces, {"type": "cuboid", "size": list(scene["object_size"])})
        outputs.append(run.path("object_model.json"))
        write_json(outputs[-1], model.to_dict())
    cube = cfg.section("synth.cube")
    if cube["enabled"]:
        seq = cube_marker_track(
            parse_moves(cube["moves"]), cube["frames_per_turn"], cube["rest_frames"], occlusion=cube["occlusion"], noise=cube["noise"], seed=cfg.seed
        )
        outputs += [run.path("cube_markers.npy"), run.path("cube_truth.json")]
        np.save(outputs[-2], seq.track)
        write_json(
            outputs[-1],
            {"moves": [{"frame": f, "face": face, "dir": d} for f, face, d in seq.moves], "poses": [_rigid_record(p) for p in seq.poses]},
        )
    run.record("synth", [], outputs, {"seed": cfg.seed})


def stage_assemble(run: Run) -> None:
    det_path, layout_path, rig_path = run.require("assemble", "synth", "detections.jsonl", "layout.json", "rig.json")
    templates = TemplateSet(load_layout(layout_path).templates)
    acfg = dict(run.cfg.section("assembly"))
    if acfg["distance_threshold"] is None:
        acfg["distance_threshold"] = float(read_json(rig_path)["edge_length_bound_px"])
    config = AssemblyConfig(**acfg)
    config.validate()

    def one(rec: dict) -> tuple[dict, dict]:
        det = DetectionFrame.from_record(rec)
        res = assemble_detection(det, templates, config)
        markers = [{"patch": m.patch, "index": m.index, "u": float(uv[0]), "v": float(uv[1])} for m, uv in res.identified(det.corners)]
        stats = {"corners": len(det.corners), "pairs": res.n_pairs, "edges": res.n_edges, "raw_blocks": len(res.raw_blocks), "blocks": len(res.blocks), "identified": len(markers)}
        return {"frame": det.frame, "camera": det.camera, "markers": markers}, stats

    results = run.map(one, list(iter_jsonl(det_path)))
    out = run.path("identified.jsonl")
    write_jsonl(out, (r for r, _ in results))
    totals = {k: int(sum(s[k] for _, s in results)) for k in results[0][1]} if results else {}
    report = run.path("assembly_report.json")
    write_json(report, {"images": len(results), "totals": totals, "distance_threshold_px": config.distance_threshold})
    run.record("assemble", [det_path, layout_path, rig_path], [out, report], acfg)


def _frame3d_record(frame: int, f3d: dict[MarkerID, MarkerObservation]) -> dict:
    return {
        "frame": frame,
        "markers": [
            {"patch": m.patch, "index": m.index, "p": o.position.tolist(), "views": int(o.views), "reproj": float(o.reproj), "interp": bool(o.interp)}
            for m, o in sorted(f3d.items())
        ],
    }


def _read_markers3d(path: Path) -> list[dict[MarkerID, MarkerObservation]]:
    frames = []
    for rec in iter_jsonl(path):
        frames.append({MarkerID(m["patch"], m["index"]): MarkerObservation(np.array(m["p"]), m["views"], m["reproj"], m["interp"]) for m in rec["markers"]})
    return frames


def stage_triangulate(run: Run) -> None:
    ident_path, = run.require("triangulate", "assemble", "identified.jsonl")
    rig_path, layout_path, session_path = run.require("triangulate", "synth", "rig.json", "layout.json", "session.json")
    session = read_json(session_path)
    cams = _cameras(rig_path)
    templates = load_layout(layout_path).templates
    rc = run.cfg.section("reconstruct")
    per_frame: list[dict[str, list]] = [dict() for _ in range(session["n_frames"])]
    for rec in iter_jsonl(ident_path):
        per_frame[rec["frame"]][rec["camera"]] = [(MarkerID(m["patch"], m["index"]), np.array([m["u"], m["v"]])) for m in rec["markers"]]
    frames = run.map(lambda ident: triangulate_frame(ident, cams, rc["inlier_threshold"], rc["min_views"]), per_frame)
    cleaned: list = []
    for seg in session["segments"]:
        chunk = frames[seg["start"] : seg["stop"]]
        if seg["continuous"] and len(chunk) > 1:
            cleaned += cleanup_tracks(chunk, templates, rc["zscore_window"], rc["zscore_threshold"], rc["cluster_factor"])
        else:
            cleaned += [patch_cluster_filter(f, templates, rc["cluster_factor"]) for f in chunk]
    out = run.path("markers3d.jsonl")
    write_jsonl(out, (_frame3d_record(k, f) for k, f in enumerate(cleaned)))
    run.record("triangulate", [ident_path, rig_path, layout_path, session_path], [out], rc)


def _hand_setup(run: Run, stage: str) -> tuple[KinematicHand, HandSolver, MarkerLayout]:
    layout_path, = run.require(stage, "synth", "layout.json")
    hand = KinematicHand()
    layout = load_layout(layout_path).layout
    hand_layout = MarkerLayout({m: layout.entries[m] for m in layout.ids() if layout.attachment(m) in hand.segment_triangles})
    return hand, HandSolver(hand, config=run.cfg.solver), hand_layout


def _observations(frames, ids: set, measured_only: bool) -> list[dict[MarkerID, np.ndarray]]:
    return [{m: o.position for m, o in f.items() if m in ids and not (measured_only and o.interp)} for f in frames]


def stage_calibrate(run: Run) -> None:
    session = _session(run, "calibrate")
    m3d, = run.require("calibrate", "triangulate", "markers3d.jsonl")
    hand, solver, hand_layout = _hand_setup(run, "calibrate")
    seg = _segment(session, "calibration")
    frames = _read_markers3d(m3d)[seg["start"] : seg["stop"]]
    obs = _observations(frames, set(hand_layout.ids()), measured_only=True)
    try:
        bindings, poses, mres = solver.calibrate(obs, solver.initial_bindings(hand_layout))
    except SolverError as exc:
        raise NumericalError(f"calibration failed: {exc}") from exc
    out_b, out_c = run.path("bindings.json"), run.path("calibration.jsonl")
    save_bindings(out_b, bindings)
    write_jsonl(out_c, ({"frame": seg["start"] + k, **_pose_record(p), "mre": m} for k, (p, m) in enumerate(zip(poses, mres))))
    log.info("calibrate: MRE %.4f mm over %d frames", 1e3 * float(np.mean(mres)), len(mres))
    run.record("calibrate", [m3d, run.path("layout.json")], [out_b, out_c], run.cfg.section("solver"))


def stage_solve(run: Run) -> None:
    session = _session(run, "solve")
    m3d, = run.require("solve", "triangulate", "markers3d.jsonl")
    b_path, = run.require("solve", "calibrate", "bindings.json")
    hand, solver, _ = _hand_setup(run, "solve")
    bindings = load_bindings(b_path)
    seg = _segment(session, "motion")
    frames = _read_markers3d(m3d)[seg["start"] : seg["stop"]]
    obs = _observations(frames, set(bindings.ids), measured_only=False)
    try:
        pose = solver.root_init(bindings, obs[0])
    except SolverError as exc:
        raise NumericalError(f"cannot initialise the first motion frame: {exc}") from exc
    sols = []
    for k, o in enumerate(obs):
        try:
            sol = solver.solve_frame(o, pose, bindings)
        except SolverError as exc:
            raise NumericalError(f"frame {seg['start'] + k}: {exc}") from exc
        sols.append(sol)
        pose = sol.pose
    out = run.path("hand_track.jsonl")
    write_hand_track(out, sols, first_frame=seg["start"])
    run.record("solve", [m3d, b_path], [out], run.cfg.section("solver"))


def stage_object(run: Run) -> None:
    session = _session(run, "object")
    if session["object"] is None:
        log.info("object: scene has no object, skipping")
        run.record("object", [], [], {"skipped": True})
        return
    m_path, = run.require("object", "synth", "object_model.json")
    m3d, = run.require("object", "triangulate", "markers3d.jsonl")
    model = RigidObjectModel.from_dict(read_json(m_path))
    seg = _segment(session, "motion")
    frames = _read_markers3d(m3d)[seg["start"] : seg["stop"]]
    obs = [{m: o.position for m, o in f.items() if m in model.markers and not o.interp} for f in frames]
    results, stats = marker_fit_residuals(obs, model, first_frame=seg["start"])
    out, rep = run.path("object_track.jsonl"), run.path("object_report.json")
    write_object_track(out, results)
    write_json(rep, stats)
    run.record("object", [m3d, m_path], [out, rep])


def stage_rubik(run: Run) -> None:
    if not run.cfg.section("synth.cube")["enabled"]:
        log.info("rubik: cube disabled, skipping")
        run.record("rubik", [], [], {"skipped": True})
        return
    track_path, = run.require("rubik", "synth", "cube_markers.npy")
    try:
        result = reconstruct_sequence(np.load(track_path), config=run.cfg.rubik)
    except RubikError as exc:
        raise NumericalError(f"cube reconstruction failed: {exc}") from exc
    out_t, out_m, out_d = run.path("cube_track.jsonl"), run.path("moves.json"), run.path("rubik_report.json")
    write_rubik_outputs(out_t, out_m, result)
    write_json(out_d, {"moves": " ".join(m.notation() for m in result.moves), "diagnostics": [[f, msg] for f, msg in result.diagnostics]})
    run.record("rubik", [track_path], [out_t, out_m, out_d], run.cfg.section("rubik"))


def stage_filter(run: Run) -> None:
    fc = run.cfg.section("filter")
    fs = float(_session(run, "filter")["frame_rate"])
    hand_path, = run.require("filter", "solve", "hand_track.jsonl")
    inputs, outputs = [hand_path], [run.path("hand_track_filtered.jsonl")]
    recs = read_jsonl(hand_path)
    filt = filter_hand_records(recs, fs, fc["cutoff_hz"], fc["order"]) if fc["enabled"] else [dict(r, filtered=False) for r in recs]
    write_jsonl(outputs[0], filt)
    obj_path = run.path("object_track.jsonl")
    if obj_path.exists():
        orecs = read_jsonl(obj_path)
        ofilt = filter_rigid_records(orecs, fs, fc["cutoff_hz"], fc["order"]) if fc["enabled"] else orecs
        inputs.append(obj_path)
        outputs.append(run.path("object_track_filtered.jsonl"))
        write_jsonl(outputs[-1], ofilt)
    run.record("filter", inputs, outputs, fc)


def _hand_poses(path: Path) -> list[HandPose]:
    return [HandPose(np.array(r["t"]), np.array(r["o6"]), np.array(r["phi"])) for r in iter_jsonl(path)]


def _mre_over_track(solver: HandSolver, poses: list[HandPose], bindings, frames) -> tuple[float, float]:
    pred, obs, vis = [], [], []
    for pose, f in zip(poses, frames):
        P = solver.predict(pose, bindings)
        O = np.zeros_like(P)
        v = np.zeros(len(P), dtype=bool)
        for k, m in enumerate(bindings.ids):
            o = f.get(m)
            if o is not None and not o.interp:
                O[k], v[k] = o.position, True
        pred.append(P)
        obs.append(O)
        vis.append(v)
    return mre(np.array(pred), np.array(obs), np.array(vis))


def stage_metrics(run: Run) -> None:
    session = _session(run, "metrics")
    fs = float(session["frame_rate"])
    raw_path, = run.require("metrics", "solve", "hand_track.jsonl")
    b_path, = run.require("metrics", "calibrate", "bindings.json")
    m3d, = run.require("metrics", "triangulate", "markers3d.jsonl")
    filt_path = run.path("hand_track_filtered.jsonl")
    track_path = filt_path if filt_path.exists() else raw_path
    inputs = [raw_path, b_path, m3d, track_path]
    mc = run.cfg.section("metrics")
    hand, solver, _ = _hand_setup(run, "metrics")
    bindings = load_bindings(b_path)
    seg = _segment(session, "motion")
    frames = _read_markers3d(m3d)[seg["start"] : seg["stop"]]
    raw, smooth = _hand_poses(raw_path), _hand_poses(track_path)

    report: dict = {"frames": len(raw), "track": track_path.name}
    m, s = _mre_over_track(solver, raw, bindings, frames)
    report["mre_mm"] = {"mean": 1e3 * m, "std": 1e3 * s}
    m, s = _mre_over_track(solver, smooth, bindings, frames)
    report["mre_filtered_mm"] = {"mean": 1e3 * m, "std": 1e3 * s}
    calib = read_jsonl(run.path("calibration.jsonl")) if run.path("calibration.jsonl").exists() else []
    if calib:
        report["calibration_mre_mm"] = {"mean": 1e3 * float(np.mean([r["mre"] for r in calib])), "std": 1e3 * float(np.std([r["mre"] for r in calib]))}
    reproj = [o.reproj for f in frames for o in f.values() if not o.interp]
    report["reprojection_px"] = summary(reproj)

    joints = np.array([hand.forward_kinematics(p)[1] for p in smooth])
    if len(joints) >= 4:
        r = msnr(velocities(joints, 1.0 / fs))
        report["msnr_db"] = {"value": r.db, "capped": r.capped}
        report["jerk_m_s3"] = jerk(joints, 1.0 / fs)

    objects: list[RigidTransform | None] = []
    obj_track = run.path("object_track_filtered.jsonl") if run.path("object_track_filtered.jsonl").exists() else run.path("object_track.jsonl")
    if obj_track.exists():
        inputs.append(obj_track)
        objects = [_rigid_from(r) for r in iter_jsonl(obj_track)]
        res = [r["residual"] for r in iter_jsonl(run.path("object_track.jsonl")) if r["residual"] is not None]
        report["object_residual_mm"] = {k: (1e3 * v if k not in ("n",) else v) for k, v in summary(res).items()}
        model = RigidObjectModel.from_dict(read_json(run.path("object_model.json")))
        verts = [solver.posed_vertices(p) for p in smooth]
        pen = penetration(verts, MeshSDF(model.vertices, model.faces), objects)
        report["penetration_mm"] = {"mean": 1e3 * pen.mean, "std": 1e3 * pen.std}

    phi = np.array([p.phi for p in smooth])
    if len(phi) >= mc["clusters"]:
        if objects and all(o is not None for o in objects):
            roots = [RigidTransform(p.rotation, p.t) for p in smooth]
            feats = pose_features(phi, roots, objects)
        else:
            feats = pose_features(phi)
        d, c = diversity_coherence(feats, mc["clusters"], run.cfg.seed, mc["kmeans_restarts"])
        report["diversity"], report["coherence"] = d, c

    if run.path("moves.json").exists():
        inputs.append(run.path("moves.json"))
        report["cube_moves"] = len(read_json(run.path("moves.json")))

    report["provenance"] = {
        "mre_mm": "mean distance from bound surface points to measured (non-interpolated) markers, unfiltered track",
        "mre_filtered_mm": "same, evaluated on the low-pass filtered track",
        "msnr_db": "3-tap moving-average smoothing of joint velocities; capped flags a residual below 1e-12",
        "jerk_m_s3": "mean magnitude of the third difference of joint positions",
        "diversity": "package-defined formula (centroid spread over RMS feature norm); not comparable to published tables",
        "coherence": "package-defined formula (1 - within-cluster over global spread); not comparable to published tables",
        "penetration_mm": "per-frame maximum depth of hand vertices inside the object mesh",
    }
    report["config"] = {"metrics": mc, "filter": run.cfg.section("filter"), "frame_rate": fs}
    out = run.path("metrics.json")
    write_json(out, report)
    run.record("metrics", inputs, [out], mc)


# ---------------------------------------------------------------------------
# evaluation


def diff_moves(expected: list[dict], got: list[dict], frame_tol: int) -> list[dict]:
    """Differences between two move lists; each entry names the frame and face involved."""
    key = lambda m: f"{m['face']}{'' if m['dir'] < 0 else chr(39)}"  # noqa: E731
    out = []
    sm = difflib.SequenceMatcher(a=[key(m) for m in expected], b=[key(m) for m in got], autojunk=False)
    for op, a0, a1, b0, b1 in sm.get_opcodes():
        if op == "equal":
            for i, j in zip(range(a0, a1), range(b0, b1)):
                if abs(expected[i]["frame"] - got[j]["frame"]) > frame_tol:
                    out.append({"op": "late", "index": i, "frame": got[j]["frame"], "face": got[j]["face"], "expected_frame": expected[i]["frame"]})
            continue
        for i in range(a0, a1):
            out.append({"op": "missing" if op == "delete" else "replaced", "index": i, "frame": expected[i]["frame"], "face": expected[i]["face"], "expected": key(expected[i])})
        for j in range(b0, b1):
            out.append({"op": "extra" if op == "insert" else "replacement", "index": j, "frame": got[j]["frame"], "face": got[j]["face"], "got": key(got[j])})
    return out


def _rot_err_deg(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.degrees(np.linalg.norm(rotation_log(A.T @ B))))


def evaluate(run: Run) -> dict:
    gt_path, = run.require("eval", "synth", "ground_truth.jsonl")
    track_path, = run.require("eval", "solve", "hand_track.jsonl")
    tol = run.cfg.section("eval.tolerances")
    gt = [r for r in read_jsonl(gt_path) if r["segment"] == "motion"]
    track = read_jsonl(track_path)
    if len(gt) != len(track):
        raise EvalError(f"mismatched frame counts: ground truth has {len(gt)} motion frames, hand track has {len(track)}")
    report: dict = {"tolerances": tol, "claims": {}}
    dphi = np.degrees(np.abs(np.array([r["phi"] for r in track]) - np.array([g["hand"]["phi"] for g in gt])))
    dt = 1e3 * np.linalg.norm(np.array([r["t"] for r in track]) - np.array([g["hand"]["t"] for g in gt]), axis=1)
    # frozen DoFs had no marker evidence and deliberately carry the previous value,
    # so the accuracy claim covers observed DoFs and frozen ones are reported apart
    frozen = np.zeros(dphi.shape, dtype=bool)
    for k, r in enumerate(track):
        frozen[k, r.get("frozen", [])] = True
    observed, held = dphi[~frozen], dphi[frozen]
    report["hand"] = {
        "phi_err_deg": {"mean": float(observed.mean()), "max": float(observed.max())},
        "frozen_phi_err_deg": {"count": int(held.size), "max": float(held.max()) if held.size else 0.0},
        "root_translation_mm": {"mean": float(dt.mean()), "max": float(dt.max())},
    }
    report["claims"]["pose"] = bool(observed.max() < tol["pose_deg"])
    if run.path("metrics.json").exists():
        mre_mm = read_json(run.path("metrics.json"))["mre_mm"]["mean"]
        report["mre_mm"] = mre_mm
        report["claims"]["mre"] = bool(mre_mm < tol["mre_mm"])
    if run.path("object_track.jsonl").exists():
        obj = read_jsonl(run.path("object_track.jsonl"))
        if len(obj) != len(gt):
            raise EvalError(f"mismatched frame counts: object track has {len(obj)} frames, ground truth {len(gt)}")
        pairs = [(_rigid_from(o), _rigid_from(g["object"])) for o, g in zip(obj, gt)]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        if pairs:
            rerr = [_rot_err_deg(a.rotation, b.rotation) for a, b in pairs]
            terr = [1e3 * float(np.linalg.norm(a.translation - b.translation)) for a, b in pairs]
            report["object"] = {"rotation_deg_max": max(rerr), "translation_mm_max": max(terr), "solved_frames": len(pairs)}
            report["claims"]["object"] = bool(max(rerr) < tol["object_deg"] and max(terr) < tol["object_mm"])
    if run.path("moves.json").exists() and run.path("cube_truth.json").exists():
        expected = read_json(run.path("cube_truth.json"))["moves"]
        got = read_json(run.path("moves.json"))
        diff = diff_moves(expected, got, int(tol["move_frames"]))
        report["cube"] = {"expected": len(expected), "reconstructed": len(got), "diff": diff}
        report["claims"]["moves"] = not diff
    return report


def stage_eval(run: Run) -> dict:
    report = evaluate(run)
    out = run.path("eval.json")
    write_json(out, report)
    inputs = [p for p in (run.path(n) for n in ("ground_truth.jsonl", "hand_track.jsonl", "metrics.json", "object_track.jsonl", "moves.json", "cube_truth.json")) if p.exists()]
    run.record("eval", inputs, [out], report["tolerances"])
    for claim, ok in sorted(report["claims"].items()):
        print(f"{'PASS' if ok else 'FAIL'} {claim}")
    return report


STAGE_FUNCS: dict[str, Callable[[Run], object]] = {
    "synth": stage_synth,
    "assemble": stage_assemble,
    "triangulate": stage_triangulate,
    "calibrate": stage_calibrate,
    "solve": stage_solve,
    "object": stage_object,
    "rubik": stage_rubik,
    "filter": stage_filter,
    "metrics": stage_metrics,
    "eval": stage_eval,
}


def run_pipeline(run: Run, stages: Iterable[str] = PIPELINE_STAGES) -> None:
    stages = list(stages)
    bad = [s for s in stages if s not in PIPELINE_STAGES]
    if bad:
        raise ConfigError(f"unknown pipeline stage(s): {', '.join(bad)}")
    for s in PIPELINE_STAGES:  # canonical order regardless of how they were listed
        if s in stages:
            log.info("running stage %s", s)
            STAGE_FUNCS[s](run)


# ---------------------------------------------------------------------------
# argument parsing


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; the subcommand copy uses SUPPRESS so it never clobbers values given before the subcommand."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=d(None), help="YAML file overriding the defaults")
    common.add_argument("--seed", type=int, default=d(None), help="override the configured seed")
    common.add_argument("--threads", type=int, default=d(1), help="worker threads for per-image and per-frame work")
    common.add_argument("--out", type=Path, default=d(Path("run")), help="run directory (default: ./run)")
    common.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options(suppress=True)
    flt = argparse.ArgumentParser(add_help=False)
    flt.add_argument("--cutoff-hz", type=float, help="low-pass cutoff (default 5)")
    flt.add_argument("--filter-order", type=int, help="Butterworth order (default 2)")
    flt.add_argument("--no-filter", action="store_true", help="pass tracks through unfiltered")

    p = argparse.ArgumentParser(prog="markercap", description=__doc__.splitlines()[0], parents=[_common_options(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)
    help_text = {
        "synth": "render a synthetic scene bundle",
        "assemble": "identify corners by edge-first block assembly",
        "triangulate": "triangulate identified markers and clean tracks",
        "calibrate": "calibrate marker bindings on the hand surface",
        "solve": "solve per-frame hand poses",
        "object": "solve rigid object poses",
        "rubik": "reconstruct cube poses and move list",
        "filter": "zero-phase low-pass filter solved tracks",
        "metrics": "write metrics.json",
        "eval": "compare run outputs against ground truth",
    }
    for name in STAGES:
        sp = sub.add_parser(name, help=help_text[name], parents=[common] + ([flt] if name == "filter" else []))
        sp.set_defaults(stages=[name])
    pp = sub.add_parser("pipeline", help="run several stages in order", parents=[common, flt])
    pp.add_argument("--stages", default=",".join(PIPELINE_STAGES), help="comma-separated subset of " + ",".join(PIPELINE_STAGES))
    pp.add_argument("--with-synth", action="store_true", help="render the synthetic bundle first")
    return p


def _overrides(args: argparse.Namespace) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    f = {}
    if getattr(args, "cutoff_hz", None) is not None:
        f["cutoff_hz"] = args.cutoff_hz
    if getattr(args, "filter_order", None) is not None:
        f["order"] = args.filter_order
    if getattr(args, "no_filter", False):
        f["enabled"] = False
    if f:
        o["filter"] = f
    return o


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, _overrides(args))
        run = Run(args.out, cfg, args.threads)
        if args.command == "pipeline":
            if args.with_synth:
                stage_synth(run)
            run_pipeline(run, [s.strip() for s in args.stages.split(",") if s.strip()])
        else:
            result = STAGE_FUNCS[args.command](run)
            if args.command == "eval" and not all(result["claims"].values()):
                return EXIT_CLAIM
    except StageDependencyError as exc:
        log.error("%s", exc)
        return EXIT_DEPENDENCY
    except (NumericalError, SolverError, RubikError, GeometryError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ConfigError, EvalError, FilterError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())

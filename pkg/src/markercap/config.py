"""Loading, merging and validating the pipeline configuration."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .assembly import AssemblyConfig
from .hand_solver import SolverConfig
from .rubik import RubikConfig
from .synth import DetectionNoiseModel, RigConfig


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("markercap").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def _check_type(key: str, default: Any, value: Any) -> None:
    if default is None or value is None and key.endswith("distance_threshold"):
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) == len(default)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected a value like {default!r}, got {value!r}")


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"{key}: unknown configuration key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected a mapping")
            out[k] = merge(base[k], v, key + ".")
        else:
            _check_type(key, base[k], v)
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    raw: dict
    rig: RigConfig
    noise: DetectionNoiseModel
    assembly: AssemblyConfig
    solver: SolverConfig
    rubik: RubikConfig

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name: str) -> dict:
        node = self.raw
        for part in name.split("."):
            node = node[part]
        return node


def _build(section: str, factory, values: dict):
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        obj = factory(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    return obj


def _validate_plain(cfg: dict) -> None:
    scene = cfg["synth"]["scene"]
    for key in ("calibration_frames", "motion_frames"):
        if scene[key] < 1:
            raise ConfigError(f"synth.scene.{key} must be at least 1")
    if not 0 < scene["motion_amplitude"] <= 1:
        raise ConfigError("synth.scene.motion_amplitude must lie in (0, 1]")
    cube = cfg["synth"]["cube"]
    if not 0 <= cube["occlusion"] < 1:
        raise ConfigError("synth.cube.occlusion must lie in [0, 1)")
    if cube["noise"] < 0 or cube["frames_per_turn"] < 2 or cube["rest_frames"] < 1:
        raise ConfigError("synth.cube: noise must be >= 0, frames_per_turn >= 2, rest_frames >= 1")
    rec = cfg["reconstruct"]
    if rec["min_views"] < 2 or rec["zscore_window"] < 3 or rec["zscore_threshold"] <= 0:
        raise ConfigError("reconstruct: min_views >= 2, zscore_window >= 3, zscore_threshold > 0 required")
    flt = cfg["filter"]
    if flt["order"] < 1:
        raise ConfigError("filter.order must be at least 1")
    if not 0 < flt["cutoff_hz"] < cfg["synth"]["rig"]["frame_rate"] / 2:
        raise ConfigError("filter.cutoff_hz must lie below the Nyquist frequency of synth.rig.frame_rate")
    if cfg["metrics"]["clusters"] < 1 or cfg["metrics"]["kmeans_restarts"] < 1:
        raise ConfigError("metrics.clusters and metrics.kmeans_restarts must be positive")
    if cfg["assembly"]["distance_threshold"] is not None and cfg["assembly"]["distance_threshold"] <= 0:
        raise ConfigError("assembly.distance_threshold must be positive or null")


def build_config(override: dict | None = None) -> PipelineConfig:
    raw = merge(default_config(), override or {})
    _validate_plain(raw)
    asm = dict(raw["assembly"])
    asm["distance_threshold"] = asm["distance_threshold"] or 1.0  # placeholder until the rig bound is known
    return PipelineConfig(
        raw=raw,
        rig=_build("synth.rig", RigConfig, raw["synth"]["rig"]),
        noise=_build("synth.noise", DetectionNoiseModel, {**raw["synth"]["noise"], "rng_seed": int(raw["seed"])}),
        assembly=_build("assembly", AssemblyConfig, asm),
        solver=_build("solver", SolverConfig, raw["solver"]),
        rubik=_build("rubik", RubikConfig, raw["rubik"]),
    )


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``, validated as a whole."""
    user: dict = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a mapping")
    merged = merge(default_config(), user)
    return build_config(merge(default_config(), _deep_update(merged, overrides or {})))


def _deep_update(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out

"""Run configuration: built-in defaults, overridden by a YAML file, overridden by CLI flags."""
from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .bevgrid import GridSpec
from .denoise import NoiseSpec
from .interaction import SelectionSchedule
from .planner import CostWeights, RefineConfig
from .scene import PerceptionNoise

OUT_ENV = "EGOPLAN_OUT"

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": None,
    "C": 16,
    "grid": {"x_range": [-30.0, 30.0], "y_range": [-15.0, 15.0], "cell": 0.5},
    "selection": {"agent_fractions": [0.20, 0.05, 0.02], "map_fractions": [0.20, 0.05, 0.02]},
    "refine": {"N": 2, "steps": 60, "step_size": 0.1, "d_safe": 1.0, "max_halvings": 20,
               "agent_futures": "predicted",
               "weights": {"w_col": 1.0, "w_bound": 0.5, "w_dir": 0.1, "w_reg": 0.05}},
    "noise": {"s": 2.0, "G": 3, "multipliers": [1.0, 1.0, 0.25, 0.05, 0.05, 0.05, 0.1, 0.1,
                                                 0.25, 0.25, 0.25]},
    "perception": {"sigma_xy": 0.0, "sigma_logdim": 0.0, "sigma_yaw": 0.0, "sigma_v": 0.0,
                   "drop_rate": 0.0},
    "protocols": ["obb", "grid"],
    "ego": {"length": 4.08, "width": 1.85},
    "checkpoint": None,
}


class ConfigError(ValueError):
    pass


def _merge(base, over, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} expects a mapping")
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def _set_path(cfg, dotted, value):
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value


def load_config(path=None, overrides=None) -> dict:
    """Effective config: defaults < YAML file < ``overrides`` (dotted keys, None skipped)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        _merge(cfg, data)
    for k, v in (overrides or {}).items():
        if v is not None:
            _set_path(cfg, k, v)
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUT_ENV, "out")
    build(cfg)  # validate every nested invariant up front
    return cfg


def build(cfg):
    """Typed objects for the pipeline; raises ConfigError on invalid values."""
    try:
        g = cfg["grid"]
        r = dict(cfg["refine"])
        weights = CostWeights(**r.pop("weights"))
        out = {
            "spec": GridSpec(tuple(g["x_range"]), tuple(g["y_range"]), float(g["cell"])),
            "schedule": SelectionSchedule(tuple(cfg["selection"]["agent_fractions"]),
                                          tuple(cfg["selection"]["map_fractions"])),
            "refine": RefineConfig(weights=weights, **r),
            "noise": NoiseSpec(float(cfg["noise"]["s"]), int(cfg["noise"]["G"]),
                               tuple(cfg["noise"]["multipliers"])),
            "perception": PerceptionNoise(**cfg["perception"]),
        }
        if int(cfg["C"]) < 4 or int(cfg["C"]) % 4:
            raise ValueError("C must be a positive multiple of 4")
        if int(cfg["workers"]) < 1:
            raise ValueError("workers must be >= 1")
        if not (float(cfg["ego"]["length"]) > 0 and float(cfg["ego"]["width"]) > 0):
            raise ValueError("ego dimensions must be positive")
        out["ego_dims"] = (float(cfg["ego"]["length"]), float(cfg["ego"]["width"]))
        for p in cfg["protocols"]:
            if p not in ("obb", "grid"):
                raise ValueError(f"unknown protocol {p!r}")
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return out


def dump_config(cfg) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)

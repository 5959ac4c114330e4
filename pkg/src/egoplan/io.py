"""File formats: scenario/1 JSON (schema-validated), plus small read/write helpers."""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from .errors import SchemaError
from .scene import AnchorBox, Agent, Command, EgoIntent, MapPolyline, Scenario, Trajectory

SCENARIO_SCHEMA_ID = "scenario/1"

_point = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_traj = {"type": "array", "items": _point, "minItems": 1}
_box = {"type": "array", "items": {"type": "number"}, "minItems": 11, "maxItems": 11}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["schema", "seed", "template", "dt", "ego", "agents", "maps"],
    "properties": {
        "schema": {"const": SCENARIO_SCHEMA_ID},
        "seed": {"type": "integer"},
        "template": {"type": "string"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "ego": {
            "type": "object",
            "required": ["box", "intent", "gt_future"],
            "properties": {
                "box": _box,
                "gt_future": _traj,
                "intent": {
                    "type": "object",
                    "required": ["velocity", "acceleration", "yaw_rate", "command"],
                    "properties": {
                        "velocity": {"type": "number", "minimum": 0},
                        "acceleration": {"type": "number"},
                        "yaw_rate": {"type": "number"},
                        "command": {"enum": [c.name for c in Command]},
                    },
                },
            },
        },
        "agents": {
            "type": "array",
            "maxItems": 900,
            "items": {
                "type": "object",
                "required": ["id", "box", "label", "gt_future"],
                "properties": {"id": {"type": "integer"}, "box": _box, "label": {"type": "string"},
                               "gt_future": _traj},
            },
        },
        "maps": {
            "type": "array",
            "maxItems": 100,
            "items": {
                "type": "object",
                "required": ["kind", "points"],
                "properties": {"kind": {"enum": ["divider", "ped_crossing", "boundary"]},
                               "points": {"type": "array", "items": _point,
                                          "minItems": 20, "maxItems": 20}},
            },
        },
    },
}


def scenario_to_dict(s: Scenario) -> dict:
    i = s.ego_intent
    return {
        "schema": SCENARIO_SCHEMA_ID,
        "seed": s.seed,
        "template": s.template,
        "dt": s.ego_gt_future.dt,
        "ego": {"box": s.ego_box.to_array().tolist(), "gt_future": s.ego_gt_future.waypoints.tolist(),
                "intent": {"velocity": i.velocity, "acceleration": i.acceleration,
                           "yaw_rate": i.yaw_rate, "command": i.command.name}},
        "agents": [{"id": a.id, "box": a.box.to_array().tolist(), "label": a.label,
                    "gt_future": a.gt_future.waypoints.tolist()} for a in s.agents],
        "maps": [{"kind": m.kind, "points": m.points.tolist()} for m in s.maps],
    }


def validate_scenario(d):
    try:
        jsonschema.validate(d, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"scenario/1 invalid at {where}: {exc.message}") from None


def scenario_from_dict(d) -> Scenario:
    validate_scenario(d)
    dt = float(d["dt"])
    e = d["ego"]
    it = e["intent"]
    try:
        intent = EgoIntent(float(it["velocity"]), float(it["acceleration"]), float(it["yaw_rate"]),
                           Command[it["command"]])
        agents = tuple(Agent(int(a["id"]), AnchorBox.from_array(a["box"]), a["label"],
                             Trajectory(np.asarray(a["gt_future"], dtype=np.float64), dt))
                       for a in d["agents"])
        maps = tuple(MapPolyline(np.asarray(m["points"], dtype=np.float64), m["kind"]) for m in d["maps"])
        return Scenario(AnchorBox.from_array(e["box"]), intent,
                        Trajectory(np.asarray(e["gt_future"], dtype=np.float64), dt),
                        agents, maps, int(d["seed"]), d["template"])
    except ValueError as exc:
        raise SchemaError(f"scenario/1 content invalid: {exc}") from None


def dumps(d) -> str:
    """Canonical JSON text: sorted keys, shortest round-trip float repr."""
    return json.dumps(d, indent=1, sort_keys=True) + "\n"


def write_json(d, path):
    path = Path(path)
    try:
        path.write_text(dumps(d))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def save_scenario(s: Scenario, path):
    write_json(scenario_to_dict(s), path)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(read_json(path))

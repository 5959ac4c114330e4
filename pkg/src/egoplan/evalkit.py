"""Open-loop planning metrics.

Two collision protocols are provided:

* ``obb`` -- ego yaw is estimated from the planned waypoints and collisions
  are oriented-box overlaps (separating axis test, touching counts).
* ``grid`` -- the legacy protocol: agents are rasterized into a 0.5 m
  occupancy grid, the ego footprint keeps its initial heading and its pose is
  snapped to the nearest cell center.

L2 at horizon h is the displacement at the waypoint h seconds ahead.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .scene import (DT, EGO_LENGTH, EGO_WIDTH, Agent, Command, EgoIntent, Pose, Scenario, Trajectory,
                    ego_box, encode_anchor, make_agent, straight_road)
from .rng import substream

HORIZONS = (1, 2, 3)
MIN_STEP = 0.05
GRID_CELL = 0.5


@dataclass(frozen=True)
class ObbPose:
    x: float
    y: float
    yaw: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if not (self.half_length > 0 and self.half_width > 0):
            raise ValueError("half dimensions must be positive")

    def row(self):
        return (self.x, self.y, self.yaw, self.half_length, self.half_width)

    def corners(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = []
        for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            lx, ly = sx * self.half_length, sy * self.half_width
            out.append((self.x + lx * c - ly * s, self.y + lx * s + ly * c))
        return np.array(out)


def obb_separation(a: ObbPose, b: ObbPose) -> float:
    return float(kernels.obb_separation(np.array([a.row()]), np.array([b.row()]))[0])


def obb_overlap(a: ObbPose, b: ObbPose) -> bool:
    """Closed-box separating-axis test over the four edge normals."""
    return obb_separation(a, b) <= 0.0


def _waypoints(traj):
    return np.asarray(getattr(traj, "waypoints", traj), dtype=np.float64).reshape(-1, 2)


def l2_error(plan, gt, horizons=HORIZONS, dt=DT):
    """Displacement between plan and ground truth at each horizon (seconds)."""
    p, g = _waypoints(plan), _waypoints(gt)
    need = max(int(round(h / dt)) for h in horizons)
    if p.shape != g.shape or len(p) < need:
        raise ShapeError(f"plan {p.shape} and gt {g.shape} must match and cover {need} waypoints")
    return tuple(float(np.linalg.norm(p[int(round(h / dt)) - 1] - g[int(round(h / dt)) - 1]))
                 for h in horizons)


def yaw_from_traj(traj, initial_yaw=0.0, min_step=MIN_STEP):
    """Heading at each waypoint from the segment ending there.

    The first waypoint uses the forward segment to the second one. Segments
    shorter than ``min_step`` inherit the previous heading (``initial_yaw``
    for the first waypoint).
    """
    wp = _waypoints(traj)
    n = len(wp)
    yaws = np.empty(n)
    prev = float(initial_yaw)
    for t in range(n):
        if t == 0:
            seg = wp[1] - wp[0] if n > 1 else np.zeros(2)
        else:
            seg = wp[t] - wp[t - 1]
        if math.hypot(seg[0], seg[1]) >= min_step:
            prev = math.atan2(seg[1], seg[0])
        yaws[t] = prev
    return yaws


def _agent_parts(agent):
    if isinstance(agent, Agent):
        return agent.box, agent.gt_future
    box, fut = agent
    if fut is None:
        raise ShapeError("agent has no future")
    return box, fut


def _poses(traj, yaws, half_length, half_width):
    wp = _waypoints(traj)
    n = len(wp)
    return np.column_stack([wp, yaws, np.full(n, half_length), np.full(n, half_width)])


def first_collision_obb(plan, agents, ego_dims=(EGO_LENGTH, EGO_WIDTH)):
    """Index of the first waypoint at which the ego box overlaps any agent, else None."""
    wp = _waypoints(plan)
    ego = _poses(wp, yaw_from_traj(wp, 0.0), ego_dims[0] / 2, ego_dims[1] / 2)
    first = None
    for agent in agents:
        box, fut = _agent_parts(agent)
        fw = _waypoints(fut)
        if len(fw) < len(wp):
            raise ShapeError("agent future shorter than the plan")
        fw = fw[:len(wp)]
        other = _poses(fw, yaw_from_traj(fw, box.yaw), box.length / 2, box.width / 2)
        hit = np.nonzero(kernels.obb_overlap_many(ego, other))[0]
        if len(hit) and (first is None or hit[0] < first):
            first = int(hit[0])
    return first


def _occupied_cells(agents, t, cell):
    occ = set()
    for agent in agents:
        box, fut = _agent_parts(agent)
        fw = _waypoints(fut)
        yaw = yaw_from_traj(fw, box.yaw)[t]
        pose = ObbPose(fw[t, 0], fw[t, 1], yaw, box.length / 2, box.width / 2)
        cs = pose.corners()
        i0, i1 = int(math.floor(cs[:, 0].min() / cell)), int(math.floor(cs[:, 0].max() / cell))
        j0, j1 = int(math.floor(cs[:, 1].min() / cell)), int(math.floor(cs[:, 1].max() / cell))
        c, s = math.cos(yaw), math.sin(yaw)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                dx, dy = (i + 0.5) * cell - pose.x, (j + 0.5) * cell - pose.y
                lx, ly = dx * c + dy * s, -dx * s + dy * c
                if abs(lx) <= pose.half_length and abs(ly) <= pose.half_width:
                    occ.add((i, j))
    return occ


def _ego_cells(x, y, ego_dims, cell):
    # snap the ego center to the nearest cell center; footprint keeps yaw 0
    cx = (math.floor(x / cell) + 0.5) * cell
    cy = (math.floor(y / cell) + 0.5) * cell
    hl, hw = ego_dims[0] / 2, ego_dims[1] / 2
    # cells whose interior overlaps the footprint
    i0, i1 = math.floor((cx - hl) / cell), math.ceil((cx + hl) / cell) - 1
    j0, j1 = math.floor((cy - hw) / cell), math.ceil((cy + hw) / cell) - 1
    return {(i, j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1)}


def first_collision_grid(plan, agents, ego_dims=(EGO_LENGTH, EGO_WIDTH), cell=GRID_CELL):
    wp = _waypoints(plan)
    for agent in agents:
        if len(_waypoints(_agent_parts(agent)[1])) < len(wp):
            raise ShapeError("agent future shorter than the plan")
    for t in range(len(wp)):
        occ = _occupied_cells(agents, t, cell)
        if occ and not occ.isdisjoint(_ego_cells(wp[t, 0], wp[t, 1], ego_dims, cell)):
            return t
    return None


def _rates(firsts, horizons, dt=DT):
    n = len(firsts)
    if n == 0:
        return tuple(0.0 for _ in horizons)
    out = []
    for h in horizons:
        k = int(round(h / dt)) - 1
        hits = sum(1 for f in firsts if f is not None and f <= k)
        out.append(100.0 * hits / n)
    return tuple(out)


@dataclass(frozen=True)
class CollisionResult:
    rates: tuple  # percent per horizon
    first: tuple  # first-collision waypoint index per scenario (None = clear)


def collision_rate_obb(plans, agent_sets, ego_dims=(EGO_LENGTH, EGO_WIDTH), horizons=HORIZONS):
    firsts = tuple(first_collision_obb(p, a, ego_dims) for p, a in zip(plans, agent_sets))
    return CollisionResult(_rates(firsts, horizons), firsts)


def collision_rate_grid(plans, agent_sets, ego_dims=(EGO_LENGTH, EGO_WIDTH), cell=GRID_CELL,
                        horizons=HORIZONS):
    firsts = tuple(first_collision_grid(p, a, ego_dims, cell) for p, a in zip(plans, agent_sets))
    return CollisionResult(_rates(firsts, horizons), firsts)


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class MethodRow:
    name: str
    l2: tuple
    collision: tuple


@dataclass(frozen=True)
class PlanningReport:
    name: str
    l2: tuple
    l2_avg: float
    collision: tuple
    collision_avg: float
    protocol: str = "obb"
    # relative reduction vs. the baseline row; None when undefined
    l2_improvement: float | None = None
    collision_improvement: float | None = None
    baseline: str | None = None

    def __post_init__(self):
        if any(not 0.0 <= c <= 100.0 for c in self.collision):
            raise ValueError("collision rates are percentages in [0, 100]")


def relative_improvement(baseline_avg, avg):
    if baseline_avg == 0:
        return None
    return (baseline_avg - avg) / baseline_avg


def aggregate_report(rows, baseline=0, protocol="obb"):
    """Average the horizons of each row and compare every row to ``baseline``.

    ``baseline`` is a row index or name, or None for no comparison.
    """
    rows = list(rows)
    base = None
    if baseline is not None and rows:
        if isinstance(baseline, str):
            base = next(r for r in rows if r.name == baseline)
        else:
            base = rows[baseline]
    b_l2 = sum(base.l2) / len(base.l2) if base else None
    b_col = sum(base.collision) / len(base.collision) if base else None
    out = []
    for r in rows:
        l2_avg = sum(r.l2) / len(r.l2)
        col_avg = sum(r.collision) / len(r.collision)
        out.append(PlanningReport(
            r.name, tuple(r.l2), l2_avg, tuple(r.collision), col_avg, protocol,
            relative_improvement(b_l2, l2_avg) if base else None,
            relative_improvement(b_col, col_avg) if base else None,
            base.name if base else None))
    return out


def evaluate_method(name, plans, scenarios, protocol="obb", ego_dims=(EGO_LENGTH, EGO_WIDTH),
                    horizons=HORIZONS):
    """Mean L2 per horizon and collision rate per horizon over a scenario batch."""
    plans, scenarios = list(plans), list(scenarios)
    if len(plans) != len(scenarios):
        raise ShapeError("one plan per scenario")
    if plans:
        errs = np.array([l2_error(p, s.ego_gt_future, horizons) for p, s in zip(plans, scenarios)])
        l2 = tuple(float(v) for v in errs.mean(axis=0))
    else:
        l2 = tuple(0.0 for _ in horizons)
    agent_sets = [s.agents for s in scenarios]
    if protocol == "obb":
        res = collision_rate_obb(plans, agent_sets, ego_dims, horizons)
    elif protocol == "grid":
        res = collision_rate_grid(plans, agent_sets, ego_dims, horizons=horizons)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return MethodRow(name, l2, res.rates), res


REPORT_COLUMNS = ["method", "protocol", "l2_1s", "l2_2s", "l2_3s", "l2_avg",
                  "col_1s", "col_2s", "col_3s", "col_avg", "l2_improvement", "col_improvement"]


def _report_record(r):
    return dict(zip(REPORT_COLUMNS, [r.name, r.protocol, *r.l2, r.l2_avg, *r.collision,
                                     r.collision_avg, r.l2_improvement, r.collision_improvement]))


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            rec = _report_record(r)
            w.writerow({k: ("" if v is None else v) for k, v in rec.items()})


def write_report_json(reports, path):
    with open(path, "w") as fh:
        json.dump({"schema": "report/1", "rows": [_report_record(r) for r in reports]}, fh, indent=2)


def format_table(reports):
    """Aligned text table: L2 (m) and collision (%) at 1s/2s/3s plus averages."""
    head = (f"{'Method':<22}{'Proto':<6}" + "".join(f"{c:>8}" for c in ("L2 1s", "2s", "3s", "Avg"))
            + "".join(f"{c:>8}" for c in ("Col 1s", "2s", "3s", "Avg")))
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.name:<22}{r.protocol:<6}" + "".join(f"{v:>8.2f}" for v in (*r.l2, r.l2_avg))
                     + "".join(f"{v:>8.2f}" for v in (*r.collision, r.collision_avg)))
    for r in reports:
        if r.baseline is None or r.name == r.baseline:
            continue
        fmt = lambda v: "undefined" if v is None else f"{100 * v:.1f}%"
        lines.append(f"{r.name} vs {r.baseline}: L2 reduced {fmt(r.l2_improvement)}, "
                     f"collision reduced {fmt(r.collision_improvement)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- protocol studies

def divergence_scenario(seed, clearance=0.3, ego_dims=(EGO_LENGTH, EGO_WIDTH), cell=GRID_CELL):
    """Ego passing a sub-cell obstacle with ``clearance`` meters of true lateral gap.

    The obstacle sits inside a single grid cell and covers that cell's center,
    and the ego lateral offset is chosen so that snapping its pose to a cell
    center shifts the footprint toward the obstacle cell. The oriented boxes
    never touch; the occupancy grid reports a collision.
    """
    rng = substream(seed, "scenario", 9001)
    half_w = ego_dims[1] / 2
    for _ in range(1000):
        side = 1.0 if rng.random() < 0.5 else -1.0
        y_off = rng.uniform(0.001, cell / 2)
        snapped = (math.floor(y_off / cell) + 0.5) * cell
        top = snapped + half_w
        lo = math.floor(top / cell) * cell  # cell reached by the snapped footprint
        if lo == top:
            lo -= cell
        bottom = y_off + half_w + clearance
        if not (lo <= bottom <= lo + cell / 2):
            continue
        size = rng.uniform(0.05, min(0.25, lo + cell - bottom))
        if bottom + size < lo + cell / 2:
            continue
        break
    else:  # pragma: no cover - geometry infeasible for these dims
        raise ValueError("no divergence layout exists for these ego dimensions")
    v = rng.uniform(4.0, 8.0)
    k = int(rng.integers(2, 5))  # waypoint index where the ego passes the obstacle
    xs = v * DT * np.arange(1, 7)
    plan = Trajectory(np.column_stack([xs, np.full(6, side * y_off)]))
    cone_y = side * (bottom + size / 2)
    cone_x = (math.floor(xs[k] / cell) + 0.5) * cell
    box = encode_anchor(Pose(cone_x, cone_y, 0.0, size, 0.7, size, 0.0))
    cone = Agent(1, box, "cone", Trajectory(np.tile([cone_x, cone_y], (6, 1))))
    intent = EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD)
    scen = Scenario(ego_box(), intent, plan, (cone,), tuple(straight_road()), int(seed), "divergence")
    return scen, plan


def clearance_scenario(seed, min_clearance=2.0, ego_dims=(EGO_LENGTH, EGO_WIDTH)):
    """Straight ego with traffic kept more than ``min_clearance`` meters away at every step."""
    rng = substream(seed, "scenario", 9002)
    v = rng.uniform(4.0, 9.0)
    plan = Trajectory(np.column_stack([v * DT * np.arange(1, 7), np.zeros(6)]))
    ego = _poses(plan, yaw_from_traj(plan), ego_dims[0] / 2, ego_dims[1] / 2)
    agents = []
    for _ in range(200):
        if len(agents) >= 6:
            break
        lane = rng.choice([-7.0, -3.5, 3.5, 7.0, 0.0])
        agent = make_agent(len(agents) + 1, rng.uniform(-25, 25), lane + rng.uniform(-0.3, 0.3),
                           0.0 if rng.random() < 0.7 else math.pi, rng.uniform(0.0, 9.0),
                           "car", rng=rng)
        other = _poses(agent.gt_future, yaw_from_traj(agent.gt_future, agent.box.yaw),
                       agent.box.length / 2, agent.box.width / 2)
        if np.min(kernels.obb_separation(ego, other)) > min_clearance:
            agents.append(agent)
    intent = EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD)
    scen = Scenario(ego_box(), intent, plan, tuple(agents), tuple(straight_road(half_width=9.0)),
                    int(seed), "clearance")
    return scen, plan

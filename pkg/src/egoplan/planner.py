"""Multi-modal motion, proposal selection, constraint optimization, refinement.

The learned motion and planning heads are stood in for by a kinematic mode
bank scored against the reference line, and by gradient descent on a set of
hinge penalties (collision, road-boundary overstep, heading, offset size).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .bevgrid import (BevGrid, GridSpec, ReferenceLine, distance_map, extract_reference_line,
                      line_from_trajectory, response_target)
from .errors import DegenerateLineError, SchemaError, ShapeError
from .interaction import (QueryEncoders, SelectionParams, SelectionSchedule, agent_query,
                          coarse_to_fine_select, ego_query, map_query)
from .netlet import encode_intent, init_intent_nets
from .rng import substream
from .scene import (DT, HORIZON, AnchorBox, Command, EgoIntent, Trajectory, ctrv_positions, ego_box,
                    ground_truth_perception)

K_MODES = 6
YAW_OFFSETS = (0.0, 0.15, -0.15, 0.3, -0.3)
COMMAND_BIAS = {Command.TURN_LEFT: 0.45, Command.TURN_RIGHT: -0.45}
# speed factor of the sixth mode when the command carries no turn bias
BRAKE_FACTOR = 0.7
# distance (m) that lowers a mode's logit by one
SCORE_SCALE = 1.0


# ---------------------------------------------------------------- modes

def kinematic_rollout(box: AnchorBox, yaw_rate_offset=0.0, T=HORIZON, dt=DT, speed_scale=1.0):
    """Constant speed and turn rate from the box pose; heading follows the velocity."""
    if T < 1:
        raise ValueError("rollout needs T >= 1")
    speed = box.speed * speed_scale
    heading = math.atan2(box.vy, box.vx) if box.speed > 1e-9 else box.yaw
    return Trajectory(ctrv_positions(box.x, box.y, heading, speed, yaw_rate_offset, T, dt), dt)


@dataclass(frozen=True, eq=False)
class ModalTrajectorySet:
    modes: tuple
    scores: np.ndarray

    def __post_init__(self):
        modes = tuple(self.modes)
        sc = np.array(self.scores, dtype=np.float64).reshape(-1)
        if len(modes) != len(sc) or not modes:
            raise ShapeError("one score per mode")
        if len({len(m) for m in modes}) != 1:
            raise ShapeError("modes must share their horizon")
        if np.any(sc < 0) or np.any(sc > 1) or abs(sc.sum() - 1.0) > 1e-9:
            raise ValueError("mode scores must form a distribution")
        sc.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "scores", sc)

    @property
    def K(self):
        return len(self.modes)

    def best_index(self):
        # np.argmax returns the first maximum, i.e. the lowest mode index on ties
        return int(np.argmax(self.scores))

    def best(self) -> Trajectory:
        return self.modes[self.best_index()]


def _softmax_neg(dist):
    z = -np.asarray(dist, dtype=np.float64) / SCORE_SCALE
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def _dist_to_extended_line(P, pts):
    """Distance to a polyline whose first and last segments extend without end.

    The line is sampled on grid rows and stops where the grid does, so only
    the lateral deviation of points beyond its ends should count.
    """
    a = pts[:-1]
    d = np.diff(pts, axis=0)
    L2 = np.einsum("ij,ij->i", d, d)
    lo, hi = np.zeros(len(d)), np.ones(len(d))
    lo[0], hi[-1] = -np.inf, np.inf
    t = np.clip(np.einsum("tsj,sj->ts", P[:, None] - a[None], d) / L2, lo, hi)
    diff = P[:, None] - (a[None] + t[..., None] * d[None])
    return np.sqrt(np.min(np.einsum("tsj,tsj->ts", diff, diff), axis=1))


def _mean_dist_to_line(traj, line: ReferenceLine):
    if len(line) >= 2:
        dist = float(np.mean(_dist_to_extended_line(traj.waypoints, line.points)))
    elif len(line) == 1:
        dist = float(np.mean(kernels.min_dist_points(traj.waypoints, line.points)))
    else:
        return 0.0
    # sub-nanometre differences are rounding noise: keep them as ties (lowest mode wins)
    return round(dist, 9)


def _ego_modes(intent: EgoIntent, command: Command, T, dt):
    box = replace(ego_box(), vx=float(intent.velocity))
    modes = [kinematic_rollout(box, w, T, dt) for w in YAW_OFFSETS]
    if command in COMMAND_BIAS:
        modes.append(kinematic_rollout(box, COMMAND_BIAS[command], T, dt))
    else:
        modes.append(kinematic_rollout(box, 0.0, T, dt, speed_scale=BRAKE_FACTOR))
    return modes


def _agent_modes(box, T, dt):
    modes = [kinematic_rollout(box, w, T, dt) for w in YAW_OFFSETS]
    modes.append(kinematic_rollout(box, 0.0, T, dt, speed_scale=BRAKE_FACTOR))
    return modes


def predict_motion_joint(agents, intent: EgoIntent, line: ReferenceLine, T=HORIZON, dt=DT):
    """Mode sets for every selected agent and for the three command copies of the ego.

    Ego modes are scored by closeness to the reference line. Agent modes are
    scored by closeness to their own constant-velocity path.
    Returns ({agent id: set}, {Command: set}).
    """
    agent_sets = {}
    for a in agents:
        modes = _agent_modes(a.box, T, dt)
        base = modes[0].waypoints
        d = [float(np.mean(np.linalg.norm(m.waypoints - base, axis=1))) for m in modes]
        agent_sets[a.id] = ModalTrajectorySet(modes, _softmax_neg(d))
    ego_sets = {}
    for cmd in Command:
        modes = _ego_modes(intent, cmd, T, dt)
        ego_sets[cmd] = ModalTrajectorySet(modes, _softmax_neg([_mean_dist_to_line(m, line)
                                                                for m in modes]))
    return agent_sets, ego_sets


def select_proposal(ego_sets, command: Command) -> Trajectory:
    if command not in ego_sets:
        raise ValueError(f"no ego mode set for {command!r}")
    return ego_sets[command].best()


# ---------------------------------------------------------------- constraint cost

@dataclass(frozen=True)
class CostWeights:
    w_col: float = 1.0
    w_bound: float = 0.5
    w_dir: float = 0.1
    w_reg: float = 0.05

    def __post_init__(self):
        if min(self.w_col, self.w_bound, self.w_dir, self.w_reg) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass(frozen=True)
class PlanCost:
    collision: float
    overstep: float
    direction: float
    regularizer: float
    weights: CostWeights = CostWeights()

    @property
    def total(self):
        w = self.weights
        return (w.w_col * self.collision + w.w_bound * self.overstep
                + w.w_dir * self.direction + w.w_reg * self.regularizer)

    def to_dict(self):
        return {"collision": self.collision, "overstep": self.overstep,
                "direction": self.direction, "regularizer": self.regularizer, "total": self.total}


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    return a - 2.0 * math.pi * np.ceil((a - math.pi) / (2.0 * math.pi))


@dataclass(frozen=True, eq=False)
class PlanContext:
    """Everything the cost needs besides the trajectory, pre-arranged as arrays."""

    line: ReferenceLine
    agent_futures: np.ndarray  # (A, T, 2)
    boundaries: tuple = ()
    start: tuple = (0.0, 0.0)
    # derived segment tables, filled in __post_init__
    _seg_a: np.ndarray = field(default=None, repr=False)
    _seg_d: np.ndarray = field(default=None, repr=False)
    _seg_end: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        fut = np.asarray(self.agent_futures, dtype=np.float64)
        if fut.size == 0:
            fut = fut.reshape(0, 0, 2)
        if fut.ndim != 3 or fut.shape[-1] != 2:
            raise ShapeError("agent futures must be (A, T, 2)")
        object.__setattr__(self, "agent_futures", fut)
        polys = tuple(np.asarray(getattr(b, "points", b), dtype=np.float64) for b in self.boundaries)
        object.__setattr__(self, "boundaries", polys)
        a, d, end = [], [], []
        for p in polys:
            n = len(p) - 1
            a.append(p[:-1])
            d.append(np.diff(p, axis=0))
            flag = np.zeros((n, 2), dtype=bool)
            flag[0, 0] = True   # t clamped to 0 on the first segment is the polyline start
            flag[-1, 1] = True  # t clamped to 1 on the last segment is the polyline end
            end.append(flag)
        object.__setattr__(self, "_seg_a", np.vstack(a) if a else np.zeros((0, 2)))
        object.__setattr__(self, "_seg_d", np.vstack(d) if d else np.zeros((0, 2)))
        object.__setattr__(self, "_seg_end", np.vstack(end) if end else np.zeros((0, 2), bool))


def _collision(P, fut, d_safe):
    if fut.shape[0] == 0:
        return 0.0, np.zeros_like(P)
    if fut.shape[1] != P.shape[0]:
        raise ShapeError(f"plan has {P.shape[0]} waypoints, agent futures {fut.shape[1]}")
    diff = P[None] - fut
    dist = np.hypot(diff[..., 0], diff[..., 1])
    h = np.maximum(0.0, d_safe - dist)
    safe = np.where(dist > 1e-12, dist, 1.0)
    coef = np.where((h > 0) & (dist > 1e-12), -2.0 * h / safe, 0.0)
    return float(np.sum(h * h)), np.sum(coef[..., None] * diff, axis=0)


def _overstep(P, ctx: PlanContext, d_safe):
    grad = np.zeros_like(P)
    if len(ctx._seg_a) == 0 or len(ctx.line) == 0:
        return 0.0, grad
    a, d = ctx._seg_a, ctx._seg_d
    L2 = np.einsum("ij,ij->i", d, d)
    rel = P[:, None, :] - a[None]
    t_raw = np.einsum("tsj,sj->ts", rel, d) / L2
    t = np.clip(t_raw, 0.0, 1.0)
    q = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(P[:, None, :] - q, axis=2)
    nearest = np.argmin(dist, axis=1)
    normal = np.column_stack([-d[:, 1], d[:, 0]]) / np.sqrt(L2)[:, None]
    ref = ctx.line.points[0]
    cost = 0.0
    for k, s in enumerate(nearest):
        tk = t_raw[k, s]
        if (tk <= 0.0 and ctx._seg_end[s, 0]) or (tk >= 1.0 and ctx._seg_end[s, 1]):
            continue  # beyond the polyline's ends: no side is defined
        ref_side = np.sign(normal[s] @ (ref - a[s]))
        if ref_side == 0.0:
            continue
        signed = ref_side * float(normal[s] @ (P[k] - a[s]))
        h = d_safe / 2.0 - signed
        if h > 0.0:
            cost += h * h
            grad[k] -= 2.0 * h * ref_side * normal[s]
    return cost, grad


def _line_heading_at(line: ReferenceLine, x):
    pts = line.points
    seg = np.diff(pts, axis=0)
    i = np.clip(np.searchsorted(pts[:, 0], x, side="right") - 1, 0, len(seg) - 1)
    return np.arctan2(seg[i, 1], seg[i, 0])


def _direction(P, ctx: PlanContext):
    grad = np.zeros_like(P)
    if len(ctx.line) < 2:
        return 0.0, grad
    prev = np.vstack([np.asarray(ctx.start, dtype=np.float64)[None], P[:-1]])
    seg = P - prev
    n2 = np.einsum("ij,ij->i", seg, seg)
    ok = n2 > 1e-12
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    diff = np.where(ok, wrap_angle(heading - _line_heading_at(ctx.line, P[:, 0])), 0.0)
    # d atan2(dy, dx) / d(dx, dy) = (-dy, dx) / |seg|^2
    g = np.where(ok[:, None], 2.0 * diff[:, None] * np.column_stack([-seg[:, 1], seg[:, 0]])
                 / np.where(ok, n2, 1.0)[:, None], 0.0)
    grad += g
    grad[:-1] -= g[1:]
    return float(np.sum(diff * diff)), grad


def cost_and_grad(points, offsets, ctx: PlanContext, weights: CostWeights, d_safe):
    """PlanCost of ``points`` plus the gradient of its total w.r.t. the offsets."""
    P = np.asarray(points, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    col, gc = _collision(P, ctx.agent_futures, d_safe)
    ovr, gb = _overstep(P, ctx, d_safe)
    dirc, gd = _direction(P, ctx)
    reg = float(np.sum(o * o))
    cost = PlanCost(col, ovr, dirc, reg, weights)
    grad = (weights.w_col * gc + weights.w_bound * gb + weights.w_dir * gd
            + weights.w_reg * 2.0 * o)
    return cost, grad


def constraint_cost(traj, agent_futures, boundaries, line: ReferenceLine,
                    weights: CostWeights = CostWeights(), d_safe=1.0, offsets=None) -> PlanCost:
    """Penalties for collision, boundary overstep, heading mismatch and offset size."""
    P = np.asarray(getattr(traj, "waypoints", traj), dtype=np.float64)
    fut = [np.asarray(getattr(f, "waypoints", f), dtype=np.float64) for f in agent_futures]
    for f in fut:
        if f.shape != P.shape:
            raise ShapeError(f"plan has {len(P)} waypoints, an agent future {len(f)}")
    ctx = PlanContext(line, np.stack(fut) if fut else np.zeros((0, len(P), 2)), tuple(boundaries))
    o = np.zeros_like(P) if offsets is None else np.asarray(offsets, dtype=np.float64)
    return cost_and_grad(P, o, ctx, weights, d_safe)[0]


# ---------------------------------------------------------------- optimization

@dataclass(frozen=True)
class RefineConfig:
    N: int = 2
    steps: int = 60
    step_size: float = 0.1
    d_safe: float = 1.0
    weights: CostWeights = CostWeights()
    max_halvings: int = 20
    # futures the collision term sees: "predicted" (best agent mode) or "gt"
    agent_futures: str = "predicted"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("refinement needs N >= 1")
        if self.step_size < 0 or self.steps < 0:
            raise ValueError("step size and step count must be non-negative")
        if self.d_safe < 0:
            raise ValueError("d_safe must be non-negative")
        if self.agent_futures not in ("predicted", "gt"):
            raise ValueError("agent_futures is 'predicted' or 'gt'")

    def to_dict(self):
        return {"N": self.N, "steps": self.steps, "step_size": self.step_size,
                "d_safe": self.d_safe, "max_halvings": self.max_halvings,
                "agent_futures": self.agent_futures, "weights": vars(self.weights).copy()}


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    refined: Trajectory
    offsets: np.ndarray
    before: PlanCost
    after: PlanCost
    accepted: int


def descend(proposal: Trajectory, ctx: PlanContext, cfg: RefineConfig, extra=None):
    """Gradient descent on the offsets with backtracking.

    A step is only taken when it strictly lowers the total, so the result
    never costs more than the proposal. ``extra(offsets) -> (value, grad)``
    adds a term to the objective without entering the reported PlanCost.
    """
    base = np.asarray(proposal.waypoints, dtype=np.float64)

    def objective(o):
        c, g = cost_and_grad(base + o, o, ctx, cfg.weights, cfg.d_safe)
        if extra is None:
            return c, c.total, g
        v, ge = extra(o)
        return c, c.total + v, g + ge

    o = np.zeros_like(base)
    cost0, f, g = objective(o)
    cost = cost0
    accepted = 0
    for _ in range(cfg.steps):
        if cfg.step_size == 0 or not np.any(g):
            break
        step = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            cand = o - step * g
            c_c, f_c, g_c = objective(cand)
            if f_c < f:
                o, cost, f, g = cand, c_c, f_c, g_c
                accepted += 1
                break
            step *= 0.5
        else:
            break
    return OptimizeResult(Trajectory(base + o, proposal.dt), o, cost0, cost, accepted)


def optimize_plan(proposal: Trajectory, ctx: PlanContext, cfg: RefineConfig) -> OptimizeResult:
    if not ctx.line.usable:
        raise DegenerateLineError(f"reference line has {len(ctx.line)} point(s); need at least 2")
    return descend(proposal, ctx, cfg)


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineParams:
    """Frozen random weights for the query encoders, intent nets and selection."""

    C: int
    intent_nets: list
    encoders: QueryEncoders
    selection: SelectionParams

    @classmethod
    def init(cls, C=16, M=3, seed=0):
        return cls(C, init_intent_nets(C, substream(seed, "init", 3)), QueryEncoders.init(C, seed),
                   SelectionParams.init(C, M, seed))


@dataclass(frozen=True, eq=False)
class StageTrace:
    stage: int
    line: ReferenceLine
    selection: object
    proposal: Trajectory
    result: OptimizeResult
    ego_sets: dict

    def to_dict(self):
        return {"stage": self.stage,
                "selected_agents": list(self.selection.agent_ids),
                "selected_maps": list(self.selection.map_ids),
                "reference_line": self.line.to_dict(),
                "proposal": self.proposal.waypoints.tolist(),
                "offsets": self.result.offsets.tolist(),
                "cost_before": self.result.before.to_dict(),
                "cost_after": self.result.after.to_dict()}


@dataclass(frozen=True, eq=False)
class RefineResult:
    final: Trajectory
    stages: tuple
    command: Command


def initial_line(scenario, spec: GridSpec, regressor=None) -> ReferenceLine:
    """Stage-1 line from the learned response map, or from the target map when no model is given."""
    if regressor is not None:
        m_r = regressor.predict(scenario.ego_intent, spec)
    else:
        m_r = response_target(spec, scenario.ego_gt_future)
    return extract_reference_line(m_r)


def iterate_refine(scenario, cfg: RefineConfig = RefineConfig(), params: PipelineParams = None,
                   schedule: SelectionSchedule = SelectionSchedule(), perception=None,
                   spec: GridSpec = GridSpec(), regressor=None, line: ReferenceLine = None):
    """Run N stages of selection, motion, proposal and optimization.

    Later stages warm-start from the previous refined trajectory and rebuild
    the reference line and distance map from it. Agents selected at any stage
    stay in the collision term of later stages.
    """
    params = params if params is not None else PipelineParams.init(M=schedule.M)
    perception = perception if perception is not None else ground_truth_perception(scenario)
    line = line if line is not None else initial_line(scenario, spec, regressor)
    if not line.usable:
        raise DegenerateLineError(f"reference line has {len(line)} point(s); need at least 2")
    intent = scenario.ego_intent
    T = len(scenario.ego_gt_future)
    ego_q = ego_query(encode_intent(params.intent_nets, intent))
    agent_qs = [agent_query(a, params.encoders) for a in perception.agents]
    map_qs = [map_query(m, params.encoders) for m in perception.maps]
    by_id = {a.id: a for a in perception.agents}
    boundaries = tuple(m.polyline.points for m in perception.maps if m.polyline.kind == "boundary")

    futures = {}
    stages = []
    prev = None
    for k in range(1, cfg.N + 1):
        m_d: BevGrid = distance_map(line, spec)
        sel = coarse_to_fine_select(ego_q, agent_qs, map_qs, m_d, schedule, params.selection)
        chosen = [by_id[i] for i in sel.agent_ids]
        agent_sets, ego_sets = predict_motion_joint(chosen, intent, line, T, scenario.ego_gt_future.dt)
        for a in chosen:
            if cfg.agent_futures == "gt":
                futures[a.id] = a.gt_future.waypoints
            else:
                futures[a.id] = agent_sets[a.id].best().waypoints
        fut = np.stack([futures[i] for i in sorted(futures)]) if futures else np.zeros((0, T, 2))
        proposal = select_proposal(ego_sets, intent.command) if prev is None else prev
        ctx = PlanContext(line, fut, boundaries)
        res = optimize_plan(proposal, ctx, cfg)
        stages.append(StageTrace(k, line, sel, proposal, res, ego_sets))
        prev = res.refined
        nxt = line_from_trajectory(res.refined, spec)
        if nxt is not None and nxt.usable:
            line = nxt
    return RefineResult(prev, tuple(stages), intent.command)


# ---------------------------------------------------------------- plan/1 files

PLAN_SCHEMA = "plan/1"


def plan_to_dict(result: RefineResult, scenario=None, selection_trace=True):
    d = {"schema": PLAN_SCHEMA, "dt": result.final.dt,
         "waypoints": result.final.waypoints.tolist(),
         "command": result.command.name,
         "stages": [s.to_dict() for s in result.stages]}
    if scenario is not None:
        d["scenario"] = {"seed": scenario.seed, "template": scenario.template}
    if selection_trace:
        d["selection"] = [s.selection.to_dict() for s in result.stages]
    return d


def plan_from_dict(d):
    """Read the trajectory out of a plan/1 document."""
    if d.get("schema") != PLAN_SCHEMA:
        raise SchemaError(f"expected schema {PLAN_SCHEMA!r}, got {d.get('schema')!r}")
    return Trajectory(np.asarray(d["waypoints"], dtype=np.float64), float(d["dt"]))


def dumps_plan(d) -> str:
    return json.dumps(d, indent=1, sort_keys=True) + "\n"

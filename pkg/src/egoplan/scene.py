"""Scenario data model, synthetic scene templates and a perception stand-in.

Frame convention: everything is expressed in the ego frame at the current
timestep, x forward, y left, yaw counter-clockwise from +x. Waypoints are
spaced ``DT`` seconds apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import kernels
from .errors import InvalidDimensionError, UnknownTemplateError
from .rng import substream

DT = 0.5
HORIZON = 6
MAP_POINTS = 20
MAX_DIM = 50.0
V_MAX = 30.0
# N_a / N_m caps of the sparse perception stage
MAX_AGENTS = 900
MAX_MAPS = 100
# perception range (x, y) half extents plus the padding agents may occupy
RANGE_X = 30.0
RANGE_Y = 15.0
RANGE_PAD = 10.0

EGO_LENGTH = 4.08
EGO_WIDTH = 1.85
EGO_HEIGHT = 1.56

MAP_KINDS = ("divider", "ped_crossing", "boundary")


class Command(Enum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    KEEP_FORWARD = 2

    def one_hot(self):
        v = np.zeros(3)
        v[self.value] = 1.0
        return v


@dataclass(frozen=True)
class Pose:
    """Decoded box: position, metric dimensions, yaw and velocity."""

    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0


@dataclass(frozen=True)
class AnchorBox:
    """11-dim box parameterization used by queries and denoising groups."""

    x: float
    y: float
    z: float
    log_w: float
    log_h: float
    log_l: float
    sin_yaw: float
    cos_yaw: float
    vx: float
    vy: float
    vz: float

    FIELDS = ("x", "y", "z", "log_w", "log_h", "log_l", "sin_yaw", "cos_yaw", "vx", "vy", "vz")

    def __post_init__(self):
        if abs(self.sin_yaw ** 2 + self.cos_yaw ** 2 - 1.0) > 1e-6:
            raise InvalidDimensionError("sin_yaw^2 + cos_yaw^2 must be 1")
        for name in ("log_w", "log_h", "log_l"):
            d = math.exp(getattr(self, name))
            if not 0.0 < d < MAX_DIM:
                raise InvalidDimensionError(f"{name} gives {d} m, outside (0, {MAX_DIM})")

    def to_array(self):
        return np.array([getattr(self, f) for f in self.FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))

    @property
    def yaw(self):
        return math.atan2(self.sin_yaw, self.cos_yaw)

    @property
    def length(self):
        return math.exp(self.log_l)

    @property
    def width(self):
        return math.exp(self.log_w)

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)

    @property
    def position(self):
        return np.array([self.x, self.y])


def encode_anchor(pose: Pose) -> AnchorBox:
    """Map a metric pose to its anchor-box encoding."""
    for name in ("w", "h", "l"):
        d = getattr(pose, name)
        if not d > 0.0:
            raise InvalidDimensionError(f"dimension {name}={d} must be positive")
    return AnchorBox(
        pose.x, pose.y, pose.z,
        math.log(pose.w), math.log(pose.h), math.log(pose.l),
        math.sin(pose.yaw), math.cos(pose.yaw),
        pose.vx, pose.vy, pose.vz,
    )


def decode_anchor(a: AnchorBox) -> Pose:
    return Pose(
        a.x, a.y, a.z,
        math.exp(a.log_w), math.exp(a.log_h), math.exp(a.log_l),
        math.atan2(a.sin_yaw, a.cos_yaw),
        a.vx, a.vy, a.vz,
    )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Future waypoints (T, 2) in meters, ``dt`` seconds apart."""

    waypoints: np.ndarray
    dt: float = DT

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(wp) < 1:
            raise ValueError("a trajectory needs at least one waypoint")
        if not np.all(np.isfinite(wp)):
            raise ValueError("trajectory waypoints must be finite")
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)

    def __len__(self):
        return len(self.waypoints)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.waypoints, other.waypoints)

    def __hash__(self):
        return hash((self.dt, self.waypoints.tobytes()))

    def shifted(self, offset):
        return Trajectory(self.waypoints + np.asarray(offset, dtype=np.float64), self.dt)


@dataclass(frozen=True)
class EgoIntent:
    velocity: float
    acceleration: float
    yaw_rate: float
    command: Command

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError("ego velocity must be non-negative")
        if not isinstance(self.command, Command):
            raise ValueError(f"unknown command {self.command!r}")


@dataclass(frozen=True, eq=False)
class MapPolyline:
    points: np.ndarray
    kind: str

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) != MAP_POINTS:
            raise ValueError(f"map polylines carry exactly {MAP_POINTS} points, got {len(pts)}")
        if np.min(np.linalg.norm(np.diff(pts, axis=0), axis=1)) <= 1e-6:
            raise ValueError("consecutive map points must be distinct")
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, MapPolyline):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.kind, self.points.tobytes()))


@dataclass(frozen=True)
class Agent:
    id: int
    box: AnchorBox
    label: str
    gt_future: Trajectory


@dataclass(frozen=True)
class Scenario:
    ego_box: AnchorBox
    ego_intent: EgoIntent
    ego_gt_future: Trajectory
    agents: tuple = ()
    maps: tuple = ()
    seed: int = 0
    template: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "maps", tuple(self.maps))
        if abs(self.ego_box.x) > 0 or abs(self.ego_box.y) > 0 or self.ego_box.sin_yaw != 0.0:
            raise ValueError("the ego box sits at the origin with identity yaw")
        if len(self.agents) > MAX_AGENTS:
            raise ValueError(f"at most {MAX_AGENTS} agents")
        if len(self.maps) > MAX_MAPS:
            raise ValueError(f"at most {MAX_MAPS} map elements")
        for a in self.agents:
            if abs(a.box.x) > RANGE_X + RANGE_PAD or abs(a.box.y) > RANGE_Y + RANGE_PAD:
                raise ValueError(f"agent {a.id} lies outside the padded perception range")


# ---------------------------------------------------------------- kinematics

def ctrv_positions(x0, y0, heading, speed, yaw_rate, steps, dt=DT):
    """Closed-form constant-speed constant-turn-rate positions at t = dt..steps*dt."""
    t = dt * np.arange(1, steps + 1)
    if abs(yaw_rate) < 1e-9:
        xs = x0 + speed * t * math.cos(heading)
        ys = y0 + speed * t * math.sin(heading)
    else:
        r = speed / yaw_rate
        xs = x0 + r * (np.sin(heading + yaw_rate * t) - math.sin(heading))
        ys = y0 + r * (math.cos(heading) - np.cos(heading + yaw_rate * t))
    return np.stack([xs, ys], axis=1)


LABEL_DIMS = {
    # (length, width, height) in meters
    "car": (4.5, 1.9, 1.6),
    "truck": (7.5, 2.5, 3.0),
    "cyclist": (1.8, 0.7, 1.7),
    "pedestrian": (0.7, 0.7, 1.8),
    "cone": (0.3, 0.3, 0.7),
}


def make_box(x, y, heading, speed, label, rng=None):
    l, w, h = LABEL_DIMS[label]
    if rng is not None:
        k = rng.uniform(0.9, 1.1)
        l, w = l * k, w * k
    return encode_anchor(Pose(x, y, 0.0, w, h, l, heading,
                              speed * math.cos(heading), speed * math.sin(heading), 0.0))


def make_agent(agent_id, x, y, heading, speed, label, yaw_rate=0.0, rng=None, steps=HORIZON):
    box = make_box(x, y, heading, speed, label, rng)
    future = Trajectory(ctrv_positions(x, y, heading, speed, yaw_rate, steps))
    return Agent(agent_id, box, label, future)


def ego_box():
    return encode_anchor(Pose(0.0, 0.0, 0.0, EGO_WIDTH, EGO_HEIGHT, EGO_LENGTH, 0.0))


def ego_future(speed, yaw_rate, steps=HORIZON):
    return Trajectory(ctrv_positions(0.0, 0.0, 0.0, speed, yaw_rate, steps))


# ---------------------------------------------------------------- maps

def line_polyline(p0, p1, kind):
    pts = np.linspace(np.asarray(p0, float), np.asarray(p1, float), MAP_POINTS)
    return MapPolyline(pts, kind)


def straight_road(x0=-30.0, x1=30.0, half_width=5.25, lane=3.5):
    maps = [
        line_polyline((x0, half_width), (x1, half_width), "boundary"),
        line_polyline((x0, -half_width), (x1, -half_width), "boundary"),
        line_polyline((x0, lane / 2), (x1, lane / 2), "divider"),
        line_polyline((x0, -lane / 2), (x1, -lane / 2), "divider"),
    ]
    return maps


def intersection_road(stop_x):
    maps = straight_road(-30.0, stop_x)
    maps.append(line_polyline((stop_x + 2.0, -6.0), (stop_x + 2.0, 6.0), "ped_crossing"))
    return maps


# ---------------------------------------------------------------- templates

def _gt_clear(ego_traj, agent, margin):
    """True when the agent's GT future keeps ``margin`` of SAT clearance from the ego GT."""
    from .evalkit import yaw_from_traj  # local import: evalkit depends on scene types

    ego_yaw = yaw_from_traj(ego_traj, 0.0)
    ag_yaw = yaw_from_traj(agent.gt_future, agent.box.yaw)
    n = len(ego_traj)
    a = np.column_stack([ego_traj.waypoints, ego_yaw,
                         np.full(n, EGO_LENGTH / 2), np.full(n, EGO_WIDTH / 2)])
    b = np.column_stack([agent.gt_future.waypoints, ag_yaw,
                         np.full(n, agent.box.length / 2), np.full(n, agent.box.width / 2)])
    a0 = np.array([[0.0, 0.0, 0.0, EGO_LENGTH / 2, EGO_WIDTH / 2]])
    b0 = np.array([[agent.box.x, agent.box.y, agent.box.yaw, agent.box.length / 2, agent.box.width / 2]])
    sep = np.concatenate([kernels.obb_separation(a0, b0), kernels.obb_separation(a, b)])
    return bool(np.all(sep > margin))


def _agents_apart(agent, others, margin=0.5):
    for o in others:
        a = np.array([[agent.box.x, agent.box.y, agent.box.yaw, agent.box.length / 2, agent.box.width / 2]])
        b = np.array([[o.box.x, o.box.y, o.box.yaw, o.box.length / 2, o.box.width / 2]])
        if kernels.obb_separation(a, b)[0] <= margin:
            return False
    return True


class _Builder:
    """Accumulates agents, rejecting ones that collide with the ego GT."""

    def __init__(self, ego_traj, margin=0.5):
        self.ego_traj = ego_traj
        self.margin = margin
        self.agents = []

    def try_add(self, factory, attempts=50):
        for _ in range(attempts):
            agent = factory(len(self.agents) + 1)
            if agent is None:
                continue
            if _gt_clear(self.ego_traj, agent, self.margin) and _agents_apart(agent, self.agents):
                self.agents.append(agent)
                return agent
        return None


def _background_traffic(b, rng, v_ego, count):
    lanes = (-3.5, 0.0, 3.5)

    def factory(i):
        lane = lanes[rng.integers(len(lanes))]
        x = rng.uniform(-28.0, 28.0)
        speed = max(0.0, v_ego + rng.uniform(-2.0, 2.0))
        label = "truck" if rng.random() < 0.15 else "car"
        return make_agent(i, x, lane + rng.uniform(-0.2, 0.2), 0.0, speed, label, rng=rng)

    for _ in range(count):
        b.try_add(factory)


def _tpl_empty(rng):
    v = rng.uniform(3.0, 10.0)
    traj = ego_future(v, 0.0)
    intent = EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD)
    return intent, traj, [], straight_road()


def _tpl_straight_traffic(rng):
    v = rng.uniform(4.0, 10.0)
    traj = ego_future(v, 0.0)
    b = _Builder(traj)
    _background_traffic(b, rng, v, int(rng.integers(4, 11)))
    return EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD), traj, b.agents, straight_road()


def _tpl_cut_in(rng):
    v = rng.uniform(5.0, 10.0)
    traj = ego_future(v, 0.0)
    b = _Builder(traj)
    side = 1.0 if rng.random() < 0.5 else -1.0

    def cutter(i):
        x = rng.uniform(4.0, 12.0)
        speed = max(1.0, v - rng.uniform(0.0, 2.5))
        heading = -side * rng.uniform(0.08, 0.2)
        yaw_rate = side * rng.uniform(0.0, 0.08)
        return make_agent(i, x, side * rng.uniform(3.0, 3.8), heading, speed, "car",
                          yaw_rate=yaw_rate, rng=rng)

    if b.try_add(cutter, attempts=200) is None:
        # fall back to a cutter far enough ahead that it always fits
        b.try_add(lambda i: make_agent(i, 14.0, side * 3.5, -side * 0.1, v, "car"))
    _background_traffic(b, rng, v, int(rng.integers(2, 6)))
    return EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD), traj, b.agents, straight_road()


def _crossing_agent(rng, traj, i, heading_choices):
    """An agent passing through an ego GT waypoint earlier than the ego does."""
    k = int(rng.integers(3, HORIZON))
    j = int(rng.integers(0, max(1, k - 2)))
    heading = heading_choices[rng.integers(len(heading_choices))] + rng.uniform(-0.15, 0.15)
    speed = rng.uniform(4.0, 8.0)
    target = traj.waypoints[k] + rng.uniform(-0.5, 0.5, size=2)
    start = target - speed * (j + 1) * DT * np.array([math.cos(heading), math.sin(heading)])
    if abs(start[0]) > RANGE_X + RANGE_PAD - 1 or abs(start[1]) > RANGE_Y + RANGE_PAD - 1:
        return None
    return make_agent(i, start[0], start[1], heading, speed, "car", rng=rng)


def _tpl_intersection(rng, sign):
    v = rng.uniform(4.0, 8.0)
    omega = sign * rng.uniform(0.2, 0.35)
    traj = ego_future(v, omega)
    cmd = Command.TURN_LEFT if sign > 0 else Command.TURN_RIGHT
    b = _Builder(traj)
    # oncoming or crossing traffic through the turning path
    headings = (math.pi, -sign * math.pi / 2)
    if b.try_add(lambda i: _crossing_agent(rng, traj, i, headings), attempts=400) is None:
        raise RuntimeError("could not place a crossing agent")  # pragma: no cover
    for _ in range(int(rng.integers(1, 4))):
        b.try_add(lambda i: _crossing_agent(rng, traj, i, headings))
    _background_traffic(b, rng, v, int(rng.integers(0, 3)))
    return EgoIntent(v, 0.0, omega, cmd), traj, b.agents, intersection_road(4.0)


def _tpl_ped_crossing(rng):
    v = rng.uniform(4.0, 9.0)
    traj = ego_future(v, 0.0)
    b = _Builder(traj)
    cross_x = rng.uniform(10.0, 22.0)

    def ped(i):
        up = rng.random() < 0.5
        heading = math.pi / 2 if up else -math.pi / 2
        y = rng.uniform(-7.0, 7.0)
        return make_agent(i, cross_x + rng.uniform(-1.5, 1.5), y, heading,
                          rng.uniform(0.8, 1.8), "pedestrian", rng=rng)

    for _ in range(int(rng.integers(1, 4))):
        b.try_add(ped)
    _background_traffic(b, rng, v, int(rng.integers(0, 3)))
    maps = straight_road()
    maps.append(line_polyline((cross_x, -6.0), (cross_x, 6.0), "ped_crossing"))
    return EgoIntent(v, 0.0, 0.0, Command.KEEP_FORWARD), traj, b.agents, maps


TEMPLATES = {
    "empty": _tpl_empty,
    "straight_traffic": _tpl_straight_traffic,
    "cut_in": _tpl_cut_in,
    "intersection_left": lambda rng: _tpl_intersection(rng, 1.0),
    "intersection_right": lambda rng: _tpl_intersection(rng, -1.0),
    "ped_crossing": _tpl_ped_crossing,
}


def gen_scenario(template: str, seed: int) -> Scenario:
    """Generate the scene for ``template`` deterministically from ``seed``."""
    if template not in TEMPLATES:
        raise UnknownTemplateError(f"unknown template {template!r}; known: {sorted(TEMPLATES)}")
    rng = substream(seed, "scenario", sorted(TEMPLATES).index(template))
    intent, traj, agents, maps = TEMPLATES[template](rng)
    return Scenario(ego_box(), intent, traj, tuple(agents), tuple(maps), int(seed), template)


# ---------------------------------------------------------------- perception

@dataclass(frozen=True)
class PerceptionNoise:
    sigma_xy: float = 0.0
    sigma_logdim: float = 0.0
    sigma_yaw: float = 0.0
    sigma_v: float = 0.0
    drop_rate: float = 0.0

    def __post_init__(self):
        for name in ("sigma_xy", "sigma_logdim", "sigma_yaw", "sigma_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")


# magnitudes that drive confidence to zero, per channel
CONF_REF = {"xy": 1.0, "logdim": 0.2, "yaw": 0.2, "v": 1.0}
CONF_FLOOR = 0.05


@dataclass(frozen=True)
class PerceivedAgent:
    id: int
    box: AnchorBox
    label: str
    confidence: float
    gt_future: Trajectory


@dataclass(frozen=True)
class PerceivedMap:
    id: int
    polyline: MapPolyline
    confidence: float


@dataclass(frozen=True)
class Perception:
    agents: tuple
    maps: tuple


def _confidence(magnitude):
    return float(min(1.0, max(CONF_FLOOR, 1.0 - magnitude)))


def perturb_perception(s: Scenario, noise: PerceptionNoise, seed: int) -> Perception:
    """Perturb ground truth the way a detector would, with a confidence per item."""
    rng = substream(seed, "perception")
    agents = []
    for a in s.agents:
        drop = rng.random() < noise.drop_rate
        dxy = rng.normal(0.0, noise.sigma_xy, 2) if noise.sigma_xy > 0 else np.zeros(2)
        dlog = rng.normal(0.0, noise.sigma_logdim, 3) if noise.sigma_logdim > 0 else np.zeros(3)
        dyaw = rng.normal(0.0, noise.sigma_yaw) if noise.sigma_yaw > 0 else 0.0
        dv = rng.normal(0.0, noise.sigma_v, 2) if noise.sigma_v > 0 else np.zeros(2)
        if drop:
            continue
        box = a.box
        fields = {}
        if noise.sigma_xy > 0:
            fields.update(x=box.x + dxy[0], y=box.y + dxy[1])
        if noise.sigma_logdim > 0:
            fields.update(log_w=box.log_w + dlog[0], log_h=box.log_h + dlog[1], log_l=box.log_l + dlog[2])
        if noise.sigma_yaw > 0:
            yaw = box.yaw + dyaw
            fields.update(sin_yaw=math.sin(yaw), cos_yaw=math.cos(yaw))
        if noise.sigma_v > 0:
            fields.update(vx=box.vx + dv[0], vy=box.vy + dv[1])
        if fields:
            box = replace(box, **{k: float(v) for k, v in fields.items()})
        magnitude = (np.linalg.norm(dxy) / CONF_REF["xy"] + np.linalg.norm(dlog) / CONF_REF["logdim"]
                     + abs(dyaw) / CONF_REF["yaw"] + np.linalg.norm(dv) / CONF_REF["v"])
        agents.append(PerceivedAgent(a.id, box, a.label, _confidence(magnitude), a.gt_future))

    maps = []
    for i, m in enumerate(s.maps, start=1):
        drop = rng.random() < noise.drop_rate
        d = rng.normal(0.0, noise.sigma_xy, m.points.shape) if noise.sigma_xy > 0 else None
        if drop:
            continue
        poly = m
        magnitude = 0.0
        if d is not None:
            poly = MapPolyline(m.points + d, m.kind)
            magnitude = float(np.mean(np.linalg.norm(d, axis=1))) / CONF_REF["xy"]
        maps.append(PerceivedMap(i, poly, _confidence(magnitude)))
    return Perception(tuple(agents), tuple(maps))


def ground_truth_perception(s: Scenario) -> Perception:
    return perturb_perception(s, PerceptionNoise(), 0)

"""Position diffusion and trajectory noise, with recovery through the planner.

Positive samples perturb each active box dimension by at most its scale;
negatives push at least one dimension into the band between one and two
scales, which is what a denoising head would be trained to tell apart.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLineError, EmptyInputError, ShapeError
from .planner import PlanContext, RefineConfig, descend
from .rng import substream
from .scene import AnchorBox, Trajectory

MOTION_SCALE = 2.0
TRAJ_FD_FRACTION = 0.2
GROUPS = 3
# x, y, z, log_w, log_h, log_l, sin, cos, vx, vy, vz
DEFAULT_MULTIPLIERS = (1.0, 1.0, 0.25, 0.05, 0.05, 0.05, 0.1, 0.1, 0.25, 0.25, 0.25)
SIN, COS = 6, 7
LOG_DIMS = (3, 4, 5)
# keep noised boxes valid: dimensions stay within (MIN, MAX) meters
_LOG_LO, _LOG_HI = math.log(1e-3), math.log(49.0)


@dataclass(frozen=True)
class NoiseSpec:
    s: float = MOTION_SCALE
    G: int = GROUPS
    multipliers: tuple = DEFAULT_MULTIPLIERS

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("noise scale must be non-negative")
        if self.G < 1:
            raise ValueError("need at least one group")
        m = tuple(float(v) for v in self.multipliers)
        if len(m) != 11 or min(m) < 0:
            raise ValueError("need 11 non-negative per-dimension multipliers")
        object.__setattr__(self, "multipliers", m)

    @property
    def scales(self):
        return self.s * np.asarray(self.multipliers)


@dataclass(frozen=True, eq=False)
class DenoiseGroup:
    """Boxes plus the raw offsets that produced them, both (G, K, 11)."""

    positives: tuple
    negatives: tuple
    pos_offsets: np.ndarray
    neg_offsets: np.ndarray
    scales: np.ndarray

    @property
    def G(self):
        return len(self.positives)

    @property
    def K(self):
        return len(self.positives[0]) if self.positives else 0


def _apply(box: AnchorBox, off):
    arr = box.to_array() + off
    sc = arr[[SIN, COS]]
    n = math.hypot(sc[0], sc[1])
    if n < 1e-12:  # noise cancelled the heading: keep the original
        arr[SIN], arr[COS] = box.sin_yaw, box.cos_yaw
    else:
        arr[SIN], arr[COS] = sc[0] / n, sc[1] / n
    arr[list(LOG_DIMS)] = np.clip(arr[list(LOG_DIMS)], _LOG_LO, _LOG_HI)
    return AnchorBox.from_array(arr)


def positive_offsets(rng, scales, shape):
    return rng.uniform(-1.0, 1.0, shape + (11,)) * scales


def negative_offsets(rng, scales, shape):
    """Uniform sign, magnitude uniform in (s_c, 2 s_c] on every active dimension."""
    u = rng.random(shape + (11,))
    sign = np.where(rng.random(shape + (11,)) < 0.5, -1.0, 1.0)
    # s_c + s_c * (1 - u) with u in [0, 1) keeps the magnitude strictly above s_c
    return sign * (scales + scales * (1.0 - u))


def diffuse_positions(gt_boxes, spec: NoiseSpec, seed) -> DenoiseGroup:
    gt = list(gt_boxes)
    if not gt:
        raise EmptyInputError("position diffusion needs at least one box")
    scales = spec.scales
    pos = np.empty((spec.G, len(gt), 11))
    neg = np.empty_like(pos)
    for g in range(spec.G):
        # one stream per group: swapping group seeds permutes groups exactly
        rng = substream(seed, "noise", g)
        pos[g] = positive_offsets(rng, scales, (len(gt),))
        neg[g] = negative_offsets(rng, scales, (len(gt),))
    positives = tuple(tuple(_apply(b, pos[g, k]) for k, b in enumerate(gt)) for g in range(spec.G))
    negatives = tuple(tuple(_apply(b, neg[g, k]) for k, b in enumerate(gt)) for g in range(spec.G))
    for a in (pos, neg):
        a.setflags(write=False)
    return DenoiseGroup(positives, negatives, pos, neg, scales)


def final_displacement(traj) -> float:
    wp = np.asarray(getattr(traj, "waypoints", traj), dtype=np.float64).reshape(-1, 2)
    if len(wp) == 0:
        raise EmptyInputError("final displacement of an empty trajectory")
    return float(np.hypot(*wp[-1]))


def trajectory_noise_scale(gt) -> float:
    return TRAJ_FD_FRACTION * final_displacement(gt)


def noise_trajectory(gt: Trajectory, G=GROUPS, seed=0):
    """G copies of ``gt`` with per-waypoint offsets uniform in [-s, s]^2, s = 0.2 FD."""
    s = trajectory_noise_scale(gt)
    out = []
    for g in range(G):
        if s == 0.0:
            out.append(gt)
            continue
        rng = substream(seed, "noise", 100 + g)
        off = rng.uniform(-s, s, gt.waypoints.shape)
        out.append(Trajectory(gt.waypoints + off, gt.dt))
    return out


def mean_residual(traj, gt) -> float:
    a = np.asarray(getattr(traj, "waypoints", traj), dtype=np.float64)
    b = np.asarray(getattr(gt, "waypoints", gt), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("residual needs matching trajectories")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


# weight of the pull toward the reference line during recovery
ATTRACTION = 1.0


@dataclass(frozen=True, eq=False)
class Recovery:
    recovered: Trajectory
    residual_before: float
    residual_after: float


def _attraction(base, line_pts, weight):
    """Squared distance of each waypoint to the reference polyline, and its gradient.

    The end segments extend to infinity: the line is sampled on grid rows and
    stops short of the trajectory ends, which must not be pulled back along it.
    """
    a = line_pts[:-1]
    d = np.diff(line_pts, axis=0)
    L2 = np.einsum("ij,ij->i", d, d)
    lo = np.zeros(len(d))
    hi = np.ones(len(d))
    lo[0], hi[-1] = -np.inf, np.inf

    def term(o):
        P = base + o
        t = np.clip(np.einsum("tsj,sj->ts", P[:, None] - a[None], d) / L2, lo, hi)
        q = a[None] + t[..., None] * d[None]
        diff = P[:, None] - q
        dist2 = np.einsum("tsj,tsj->ts", diff, diff)
        k = np.argmin(dist2, axis=1)
        rows = np.arange(len(P))
        g = 2.0 * weight * diff[rows, k]
        return float(weight * np.sum(dist2[rows, k])), g

    return term


def denoise_recover(noised: Trajectory, ctx: PlanContext, cfg: RefineConfig, gt: Trajectory,
                    attraction=ATTRACTION) -> Recovery:
    """Pull a noised trajectory back with the planner objective plus a line attraction."""
    if not ctx.line.usable:
        raise DegenerateLineError("recovery needs a usable reference line")
    term = _attraction(noised.waypoints, ctx.line.points, attraction)
    res = descend(noised, ctx, cfg, extra=term)
    return Recovery(res.refined, mean_residual(noised, gt), mean_residual(res.refined, gt))


DENOISE_COLUMNS = ["seed", "group", "residual_before", "residual_after"]


def write_denoise_csv(rows, path):
    """``rows`` are (seed, group, residual_before, residual_after) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DENOISE_COLUMNS)
        for seed, group, before, after in rows:
            w.writerow([seed, group, repr(float(before)), repr(float(after))])

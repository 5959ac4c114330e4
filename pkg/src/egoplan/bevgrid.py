"""BEV grid geometry: response-map targets, reference lines, distance maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateLineError, DomainError, EmptyInputError, ShapeError

# distance at which the geometric score reaches zero
GEO_RANGE = 30.0
TAU_REF = 0.9


@dataclass(frozen=True)
class GridSpec:
    """Rows run along x (longitudinal), columns along y (lateral)."""

    x_range: tuple = (-30.0, 30.0)
    y_range: tuple = (-15.0, 15.0)
    cell: float = 0.5

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError(f"range ({lo}, {hi}) is not a whole number of {self.cell} m cells")

    @property
    def H(self):
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def W(self):
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    @property
    def shape(self):
        return (self.H, self.W)

    def row_x(self):
        return self.x_range[0] + (np.arange(self.H) + 0.5) * self.cell

    def col_y(self):
        return self.y_range[0] + (np.arange(self.W) + 0.5) * self.cell

    def centers(self):
        """Cell centers as an (H, W, 2) array of (x, y)."""
        xx, yy = np.meshgrid(self.row_x(), self.col_y(), indexing="ij")
        return np.stack([xx, yy], axis=-1)

    def contains(self, x, y):
        return (self.x_range[0] <= x <= self.x_range[1]) and (self.y_range[0] <= y <= self.y_range[1])

    def to_dict(self):
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "cell": self.cell}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), float(d["cell"]))


@dataclass(frozen=True, eq=False)
class BevGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.spec.shape:
            raise ShapeError(f"grid values {v.shape} do not match spec {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_dict(self):
        return {"schema": "grid/1", "spec": self.spec.to_dict(),
                "values": self.values.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        spec = GridSpec.from_dict(d["spec"])
        return cls(spec, np.asarray(d["values"], dtype=np.float64).reshape(spec.shape))


@dataclass(frozen=True, eq=False)
class ReferenceLine:
    rows: tuple
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        rows = tuple(int(r) for r in self.rows)
        if len(rows) != len(pts):
            raise ShapeError("one reference point per row")
        if any(b <= a for a, b in zip(rows, rows[1:])):
            raise ValueError("reference rows must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.rows)

    @property
    def usable(self):
        return len(self.rows) >= 2

    def to_dict(self):
        return {"rows": list(self.rows), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["rows"]), np.asarray(d["points"], dtype=np.float64).reshape(-1, 2))


def geo_normalize(d):
    """Map a distance in meters to a geometric score: 1 at 0 m, 0.9 at 3 m, 0 beyond 30 m."""
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("distance must be non-negative")
    out = np.maximum(0.0, 1.0 - arr / GEO_RANGE)
    return float(out) if out.ndim == 0 else out


def response_target(spec: GridSpec, ego_future) -> BevGrid:
    """Normalized minimum distance from every cell center to the ego future waypoints."""
    wp = np.asarray(getattr(ego_future, "waypoints", ego_future), dtype=np.float64).reshape(-1, 2)
    if len(wp) == 0:
        raise EmptyInputError("ego future has no waypoints")
    d = kernels.min_dist_points(spec.centers().reshape(-1, 2), wp)
    return BevGrid(spec, geo_normalize(d).reshape(spec.shape))


def extract_reference_line(m_r: BevGrid, tau_ref: float = TAU_REF) -> ReferenceLine:
    """Per row, the value-weighted centroid of cells scoring at least ``tau_ref``."""
    spec = m_r.spec
    vals = m_r.values
    ys = spec.col_y()
    xs = spec.row_x()
    rows, pts = [], []
    for i in range(spec.H):
        mask = vals[i] >= tau_ref
        if not mask.any():
            continue
        w = vals[i, mask]
        total = w.sum()
        if total <= 0.0:  # tau_ref == 0 over a zero row
            continue
        rows.append(i)
        pts.append((xs[i], float(np.dot(w, ys[mask]) / total)))
    return ReferenceLine(tuple(rows), np.asarray(pts, dtype=np.float64).reshape(-1, 2))


def distance_map(line: ReferenceLine, spec: GridSpec) -> BevGrid:
    """Normalized distance from every cell center to the polyline through ``line``."""
    if len(line) < 2:
        raise DegenerateLineError(f"reference line has {len(line)} point(s); need at least 2")
    d = kernels.min_dist_polyline(spec.centers().reshape(-1, 2), line.points)
    return BevGrid(spec, geo_normalize(d).reshape(spec.shape))


def sample_geo_score(m_d: BevGrid, position) -> float:
    """Bilinear lookup of ``m_d`` at a metric position; zero outside the grid extent."""
    spec = m_d.spec
    x, y = float(position[0]), float(position[1])
    if not (math.isfinite(x) and math.isfinite(y)) or not spec.contains(x, y):
        return 0.0
    fi = (x - spec.x_range[0]) / spec.cell - 0.5
    fj = (y - spec.y_range[0]) / spec.cell - 0.5
    fi = min(max(fi, 0.0), spec.H - 1.0)
    fj = min(max(fj, 0.0), spec.W - 1.0)
    i0, j0 = int(math.floor(fi)), int(math.floor(fj))
    i1, j1 = min(i0 + 1, spec.H - 1), min(j0 + 1, spec.W - 1)
    ti, tj = fi - i0, fj - j0
    v = m_d.values
    top = v[i0, j0] * (1 - tj) + v[i0, j1] * tj
    bot = v[i1, j0] * (1 - tj) + v[i1, j1] * tj
    return float(top * (1 - ti) + bot * ti)


def polyline_geo_score(m_d: BevGrid, poly) -> float:
    pts = getattr(poly, "points", poly)
    return max(sample_geo_score(m_d, p) for p in pts)


def line_from_trajectory(traj, spec: GridSpec, start=(0.0, 0.0)):
    """Resample a trajectory (prefixed by ``start``) onto grid rows.

    Returns None when the path is not strictly increasing in x, which rules
    out a per-row parameterization.
    """
    wp = np.asarray(getattr(traj, "waypoints", traj), dtype=np.float64)
    path = np.vstack([np.asarray(start, dtype=np.float64)[None], wp])
    if np.any(np.diff(path[:, 0]) <= 1e-6):
        return None
    xs = spec.row_x()
    inside = (xs >= path[0, 0]) & (xs <= path[-1, 0])
    rows = np.nonzero(inside)[0]
    if len(rows) < 2:
        return None
    ys = np.interp(xs[rows], path[:, 0], path[:, 1])
    keep = (ys >= spec.y_range[0]) & (ys <= spec.y_range[1])
    rows, ys = rows[keep], ys[keep]
    if len(rows) < 2:
        return None
    return ReferenceLine(tuple(rows.tolist()), np.column_stack([xs[rows], ys]))

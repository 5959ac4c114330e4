"""Static SVG emitters: grid heat maps, loss curves, BEV scenes. No plotting library needed."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .bevgrid import BevGrid


def _doc(w, h, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">\n' + "\n".join(body) + "\n</svg>\n")


def _gray(v):
    k = int(round(255 * (1.0 - min(1.0, max(0.0, v)))))
    return f"#{k:02x}{k:02x}{k:02x}"


def heatmap_svg(grid: BevGrid, px=4) -> str:
    """Rows (x) go bottom-to-top so forward points up; values 0..1 map white..black."""
    H, W = grid.spec.shape
    vals = grid.values
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo if hi > lo else 1.0
    body = []
    for i in range(H):
        y = (H - 1 - i) * px
        # merge runs of equal color along a row to keep files small
        j = 0
        while j < W:
            c = _gray((vals[i, j] - lo) / span if hi > lo else vals[i, j])
            k = j + 1
            while k < W and _gray((vals[i, k] - lo) / span if hi > lo else vals[i, k]) == c:
                k += 1
            # columns run along +y (left), drawn right-to-left
            x = (W - k) * px
            body.append(f'<rect x="{x}" y="{y}" width="{(k - j) * px}" height="{px}" fill="{c}"/>')
            j = k
    return _doc(W * px, H * px, body)


def curve_svg(xs, series: dict, width=480, height=300, pad=40, log_y=False) -> str:
    """Line chart for one or more named series sharing ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys_all = [np.asarray(v, dtype=np.float64) for v in series.values()]
    tf = (lambda v: np.log10(np.maximum(v, 1e-12))) if log_y else (lambda v: v)
    lo = min(float(tf(y).min()) for y in ys_all) if ys_all else 0.0
    hi = max(float(tf(y).max()) for y in ys_all) if ys_all else 1.0
    if hi <= lo:
        hi = lo + 1.0
    x0, x1 = (float(xs.min()), float(xs.max())) if len(xs) else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    sx = lambda v: pad + (v - x0) / (x1 - x0) * (width - 2 * pad)
    sy = lambda v: height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    body = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for n, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, tf(np.asarray(ys, float))))
        col = colors[n % len(colors)]
        body.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{width - pad - 120}" y="{pad + 14 * n}" font-size="11" '
                    f'fill="{col}">{escape(str(name))}</text>')
    label = "log10 " if log_y else ""
    body.append(f'<text x="4" y="{pad - 8}" font-size="10">{label}[{lo:.3g}, {hi:.3g}]</text>')
    return _doc(width, height, body)


def _box_points(x, y, yaw, length, width, to_px):
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for dl, dw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        px, py = x + dl * length / 2 * c - dw * width / 2 * s, y + dl * length / 2 * s + dw * width / 2 * c
        out.append("%.2f,%.2f" % to_px(px, py))
    return " ".join(out)


def scene_svg(scenario, plan=None, selected=(), agent_modes=None, scale=8, extent=(30.0, 15.0)) -> str:
    """Top-down scene: maps, agents (selected ones highlighted), ego GT and plan.

    ``agent_modes`` maps agent id to a list of mode trajectories drawn for
    the selected agents (for example their three best modes).
    """
    ex, ey = extent
    W, H = int(2 * ey * scale), int(2 * ex * scale)
    to_px = lambda x, y: ((ey - y) * scale, (ex - x) * scale)
    sel = set(selected)
    body = [f'<rect x="0" y="0" width="{W}" height="{H}" fill="#fafafa"/>']
    styles = {"boundary": "#333333", "divider": "#999999", "ped_crossing": "#e6a700"}
    for m in scenario.maps:
        pts = " ".join("%.2f,%.2f" % to_px(*p) for p in m.points)
        body.append(f'<polyline fill="none" stroke="{styles[m.kind]}" stroke-width="1" points="{pts}"/>')
    for a in scenario.agents:
        hot = a.id in sel
        body.append(f'<polygon points="{_box_points(a.box.x, a.box.y, a.box.yaw, a.box.length, a.box.width, to_px)}" '
                    f'fill="{"#d62728" if hot else "#1f77b4"}" fill-opacity="0.6"/>')
        if hot and agent_modes and a.id in agent_modes:
            for traj in agent_modes[a.id]:
                pts = " ".join("%.2f,%.2f" % to_px(*p) for p in np.vstack([[a.box.x, a.box.y], traj.waypoints]))
                body.append(f'<polyline fill="none" stroke="#d62728" stroke-dasharray="3,2" points="{pts}"/>')
    body.append(f'<polygon points="{_box_points(0.0, 0.0, 0.0, scenario.ego_box.length, scenario.ego_box.width, to_px)}" '
                f'fill="#2ca02c"/>')
    for traj, col in ((scenario.ego_gt_future, "#2ca02c"), (plan, "#000000")):
        if traj is None:
            continue
        pts = " ".join("%.2f,%.2f" % to_px(*p) for p in np.vstack([[0.0, 0.0], traj.waypoints]))
        body.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{pts}"/>')
    return _doc(W, H, body)

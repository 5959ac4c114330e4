"""Independent reference implementations the tests compare against.

These are deliberately naive: dense sampling and explicit loops, sharing no
code with the package.
"""
import math

import numpy as np


def box_boundary(x, y, yaw, hl, hw, n):
    """``n`` points spread evenly along the perimeter of an oriented box."""
    per = 4 * (hl + hw)
    s = np.arange(n) * per / n
    local = np.empty((n, 2))
    e = [2 * hl, 2 * hw, 2 * hl, 2 * hw]
    starts = [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
    dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    acc = 0.0
    for k in range(4):
        m = (s >= acc) & (s < acc + e[k])
        t = s[m] - acc
        local[m, 0] = starts[k][0] + dirs[k][0] * t
        local[m, 1] = starts[k][1] + dirs[k][1] * t
        acc += e[k]
    c, si = math.cos(yaw), math.sin(yaw)
    return np.column_stack([x + local[:, 0] * c - local[:, 1] * si, y + local[:, 0] * si + local[:, 1] * c])


def inside_box(pts, x, y, yaw, hl, hw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = pts[:, 0] - x, pts[:, 1] - y
    lx, ly = dx * c + dy * s, -dx * s + dy * c
    return (np.abs(lx) <= hl) & (np.abs(ly) <= hw)


def boxes_overlap_sampled(a, b, n=10_000, grow=0.0):
    """Closed boxes overlap iff some boundary point of one lies in the other.

    ``grow`` inflates both boxes, which gives the oracle at the edges of a
    margin band.
    """
    a = (a[0], a[1], a[2], a[3] + grow, a[4] + grow)
    b = (b[0], b[1], b[2], b[3] + grow, b[4] + grow)
    return bool(inside_box(box_boundary(*a, n), *b).any() or inside_box(box_boundary(*b, n), *a).any())


def min_dist_brute(point, waypoints):
    best = math.inf
    for wx, wy in waypoints:
        best = min(best, math.sqrt((point[0] - wx) ** 2 + (point[1] - wy) ** 2))
    return best


def fused_score(attn_logits, geo, conf):
    """Softmax attention times geometric times class score, one object at a time."""
    m = max(attn_logits)
    exps = [math.exp(v - m) for v in attn_logits]
    total = math.fsum(exps)
    return [e / total * g * c for e, g, c in zip(exps, geo, conf)]

"""Pure numpy versions of the hot geometric kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating point contract (distances via ``sqrt(dx*dx + dy*dy)``).
"""
import numpy as np


def min_dist_points(queries, points):
    """Distance from each query (N, 2) to the nearest of ``points`` (M, 2)."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    out = np.full(len(q), np.inf)
    for px, py in p:
        dx = q[:, 0] - px
        dy = q[:, 1] - py
        np.minimum(out, np.sqrt(dx * dx + dy * dy), out=out)
    return out


def min_dist_polyline(queries, line):
    """Distance from each query (N, 2) to the polyline through ``line`` (M, 2).

    Segments of zero length degrade to their endpoint.
    """
    q = np.asarray(queries, dtype=np.float64)
    v = np.asarray(line, dtype=np.float64)
    if len(v) == 1:
        return min_dist_points(q, v)
    out = np.full(len(q), np.inf)
    for k in range(len(v) - 1):
        ax, ay = v[k]
        ex = v[k + 1, 0] - ax
        ey = v[k + 1, 1] - ay
        ll = ex * ex + ey * ey
        wx = q[:, 0] - ax
        wy = q[:, 1] - ay
        if ll > 0.0:
            t = np.clip((wx * ex + wy * ey) / ll, 0.0, 1.0)
        else:
            t = np.zeros(len(q))
        dx = wx - t * ex
        dy = wy - t * ey
        np.minimum(out, np.sqrt(dx * dx + dy * dy), out=out)
    return out


def _corners(boxes):
    cx, cy, yaw, hl, hw = boxes.T
    c, s = np.cos(yaw), np.sin(yaw)
    # (n, 4, 2), counter-clockwise starting at front-left
    sx = np.array([1.0, -1.0, -1.0, 1.0])
    sy = np.array([1.0, 1.0, -1.0, -1.0])
    lx = hl[:, None] * sx
    ly = hw[:, None] * sy
    x = cx[:, None] + lx * c[:, None] - ly * s[:, None]
    y = cy[:, None] + lx * s[:, None] + ly * c[:, None]
    return np.stack([x, y], axis=-1)


def obb_separation(a, b):
    """Largest separating-axis gap for each box pair.

    ``a`` and ``b`` are (N, 5) rows of (cx, cy, yaw, half_length, half_width).
    A positive value is a gap along some edge normal (boxes disjoint); a
    non-positive value is minus the smallest penetration depth over the four
    normals (boxes overlap or touch).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ca, cb = _corners(a), _corners(b)
    best = np.full(len(a), -np.inf)
    for boxes in (a, b):
        for ang in (boxes[:, 2], boxes[:, 2] + np.pi / 2):
            ax = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
            pa = np.einsum("nkd,nd->nk", ca, ax)
            pb = np.einsum("nkd,nd->nk", cb, ax)
            gap = np.maximum(pb.min(1) - pa.max(1), pa.min(1) - pb.max(1))
            np.maximum(best, gap, out=best)
    return best


def obb_overlap_many(a, b):
    return obb_separation(a, b) <= 0.0


# ---------------------------------------------------------------- response regressor passes
# Cell features are f[b, n] = relu(A[b] + P[n] + bias); the SE head scores
# them with per-sample weights gh[b] (gate * head weight).

def _cell_pre(A, P, bias):
    return A[:, None, :] + P[None, :, :] + bias


def response_squeeze(A, P, bias):
    """Mean over cells of the projected features, per sample: (B, C)."""
    return np.maximum(_cell_pre(A, P, bias), 0.0).mean(axis=1)


def response_head(A, P, bias, gh, head_b, T, w_bce, w_l2, tau):
    """Cell probabilities, d(loss)/d(logit) and the pooled loss sums."""
    f = np.maximum(_cell_pre(A, P, bias), 0.0)
    logit = np.matmul(f, gh[:, :, None])[..., 0] + head_b
    p = 0.5 * (1.0 + np.tanh(0.5 * logit))
    lab = T >= tau
    m = T.size
    with np.errstate(divide="ignore"):
        lp = np.where(lab, np.log(np.where(lab, p, 1.0)), np.log(np.where(lab, 1.0, 1.0 - p)))
    lp = np.maximum(lp, np.log(1e-12))
    r = p - T
    dl = (w_bce * (p - lab) + w_l2 * 2.0 * r * p * (1.0 - p)) / m
    dlx = np.matmul(dl[:, None, :], f)[:, 0, :]
    return p, dl, dlx, float(-lp.sum()), float((r * r).sum()), int(lab.sum())


def response_backprop(A, P, bias, dl, gh, ds_n):
    """Sums of d(loss)/d(pre-activation) over cells (B, C) and over samples (N, C)."""
    z = _cell_pre(A, P, bias)
    dz = (dl[:, :, None] * gh[:, None, :] + ds_n[:, None, :]) * (z > 0)
    return dz.sum(axis=1), dz.sum(axis=0)

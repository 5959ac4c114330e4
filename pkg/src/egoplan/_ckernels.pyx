# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
from libc.math cimport sqrt, cos, sin, INFINITY, M_PI


def min_dist_points(queries, points):
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = p.shape[0], i, k
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double best, dx, dy, d
    for i in range(n):
        best = INFINITY
        for k in range(m):
            dx = q[i, 0] - p[k, 0]
            dy = q[i, 1] - p[k, 1]
            d = sqrt(dx * dx + dy * dy)
            if d < best:
                best = d
        out[i] = best
    return out_arr


def min_dist_polyline(queries, line):
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, ::1] v = np.ascontiguousarray(line, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = v.shape[0], i, k
    if m == 1:
        return min_dist_points(queries, line)
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double best, ax, ay, ex, ey, ll, wx, wy, t, dx, dy, d
    for i in range(n):
        best = INFINITY
        for k in range(m - 1):
            ax = v[k, 0]
            ay = v[k, 1]
            ex = v[k + 1, 0] - ax
            ey = v[k + 1, 1] - ay
            ll = ex * ex + ey * ey
            wx = q[i, 0] - ax
            wy = q[i, 1] - ay
            t = 0.0
            if ll > 0.0:
                t = (wx * ex + wy * ey) / ll
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = wx - t * ex
            dy = wy - t * ey
            d = sqrt(dx * dx + dy * dy)
            if d < best:
                best = d
        out[i] = best
    return out_arr


cdef void _corners(double cx, double cy, double yaw, double hl, double hw,
                   double* xs, double* ys) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double sx[4]
    cdef double sy[4]
    cdef int k
    sx[0] = 1.0; sx[1] = -1.0; sx[2] = -1.0; sx[3] = 1.0
    sy[0] = 1.0; sy[1] = 1.0; sy[2] = -1.0; sy[3] = -1.0
    for k in range(4):
        xs[k] = cx + hl * sx[k] * c - hw * sy[k] * s
        ys[k] = cy + hl * sx[k] * s + hw * sy[k] * c


cdef double _separation(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t i) noexcept nogil:
    cdef double xa[4]
    cdef double ya[4]
    cdef double xb[4]
    cdef double yb[4]
    cdef double angs[4]
    cdef double best = -INFINITY, ux, uy, amin, amax, bmin, bmax, pr, gap
    cdef int j, k
    _corners(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], xa, ya)
    _corners(b[i, 0], b[i, 1], b[i, 2], b[i, 3], b[i, 4], xb, yb)
    angs[0] = a[i, 2]
    angs[1] = a[i, 2] + M_PI / 2
    angs[2] = b[i, 2]
    angs[3] = b[i, 2] + M_PI / 2
    for j in range(4):
        ux = cos(angs[j])
        uy = sin(angs[j])
        amin = INFINITY; amax = -INFINITY; bmin = INFINITY; bmax = -INFINITY
        for k in range(4):
            pr = xa[k] * ux + ya[k] * uy
            if pr < amin: amin = pr
            if pr > amax: amax = pr
            pr = xb[k] * ux + yb[k] * uy
            if pr < bmin: bmin = pr
            if pr > bmax: bmax = pr
        gap = bmin - amax
        if amin - bmax > gap:
            gap = amin - bmax
        if gap > best:
            best = gap
    return best


def obb_separation(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _separation(av, bv, i)
    return out_arr


def obb_overlap_many(a, b):
    return obb_separation(a, b) <= 0.0


from libc.math cimport tanh, log, fmax
from libc.stdlib cimport malloc, free


def response_squeeze(A, P, bias):
    q_arr = np.ascontiguousarray(A, dtype=np.float64) + np.asarray(bias, dtype=np.float64)
    cdef const double[:, ::1] q = q_arr
    cdef const double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef Py_ssize_t B = q.shape[0], N = p.shape[0], C = q.shape[1], b, n, c
    out_arr = np.zeros((B, C))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for n in range(N):
                for c in range(C):
                    out[b, c] += fmax(q[b, c] + p[n, c], 0.0)
            for c in range(C):
                out[b, c] /= N
    return out_arr


def response_head(A, P, bias, gh, double head_b, T, double w_bce, double w_l2, double tau):
    q_arr = np.ascontiguousarray(A, dtype=np.float64) + np.asarray(bias, dtype=np.float64)
    cdef const double[:, ::1] q = q_arr
    cdef const double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(gh, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(T, dtype=np.float64)
    cdef Py_ssize_t B = q.shape[0], N = p.shape[0], C = q.shape[1], b, n, c
    prob_arr = np.empty((B, N))
    dl_arr = np.empty((B, N))
    dlx_arr = np.zeros((B, C))
    cdef double[:, ::1] prob = prob_arr
    cdef double[:, ::1] dl = dl_arr
    cdef double[:, ::1] dlx = dlx_arr
    cdef double logit, pr, lab, lp, r, g, floor = log(1e-12), m = B * N
    cdef double bce = 0.0, l2 = 0.0
    cdef long pos = 0
    cdef double* f = <double*> malloc(C * sizeof(double))
    if f == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for n in range(N):
                    logit = head_b
                    for c in range(C):
                        f[c] = fmax(q[b, c] + p[n, c], 0.0)
                        logit = logit + f[c] * w[b, c]
                    pr = 0.5 * (1.0 + tanh(0.5 * logit))
                    prob[b, n] = pr
                    if t[b, n] >= tau:
                        lab = 1.0
                        pos += 1
                        lp = log(pr) if pr > 0.0 else floor
                    else:
                        lab = 0.0
                        lp = log(1.0 - pr) if pr < 1.0 else floor
                    if lp < floor:
                        lp = floor
                    bce -= lp
                    r = pr - t[b, n]
                    l2 += r * r
                    g = (w_bce * (pr - lab) + w_l2 * 2.0 * r * pr * (1.0 - pr)) / m
                    dl[b, n] = g
                    for c in range(C):
                        dlx[b, c] += g * f[c]
    finally:
        free(f)
    return prob_arr, dl_arr, dlx_arr, bce, l2, pos


def response_backprop(A, P, bias, DL, gh, ds_n):
    q_arr = np.ascontiguousarray(A, dtype=np.float64) + np.asarray(bias, dtype=np.float64)
    cdef const double[:, ::1] q = q_arr
    cdef const double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] dl = np.ascontiguousarray(DL, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(gh, dtype=np.float64)
    cdef const double[:, ::1] dsn = np.ascontiguousarray(ds_n, dtype=np.float64)
    cdef Py_ssize_t B = q.shape[0], N = p.shape[0], C = q.shape[1], b, n, c
    dzb_arr = np.zeros((B, C))
    dzn_arr = np.zeros((N, C))
    cdef double[:, ::1] dzb = dzb_arr
    cdef double[:, ::1] dzn = dzn_arr
    cdef double d, g
    with nogil:
        for b in range(B):
            for n in range(N):
                g = dl[b, n]
                for c in range(C):
                    d = (g * w[b, c] + dsn[b, c]) if q[b, c] + p[n, c] > 0.0 else 0.0
                    dzb[b, c] += d
                    dzn[n, c] += d
    return dzb_arr, dzn_arr

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Same arithmetic, same tie rules; see that module for the contracts.
"""
import numpy as np

from libc.math cimport INFINITY, sqrt

DEF PLANE = 0
DEF BOX = 1
DEF CYLINDER = 2
DEF SPHERE = 3
DEF EPS_T = 1e-9


def fps_groups(points, offsets, seeds, n_keep):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const long long[::1] sd = np.ascontiguousarray(seeds, dtype=np.int64)
    cdef const long long[::1] nk = np.ascontiguousarray(n_keep, dtype=np.int64)
    cdef Py_ssize_t n_groups = off.shape[0] - 1
    out_arr = np.empty(int(np.asarray(nk).sum()), dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t max_size = 0
    cdef Py_ssize_t g
    for g in range(n_groups):
        if off[g + 1] - off[g] > max_size:
            max_size = off[g + 1] - off[g]
    mind_arr = np.empty(max(max_size, 1), dtype=np.float64)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t pos = 0, start, size, k, step, j, cur, best_j
    cdef double px, py, pz, dx, dy, dz, dist, best
    for g in range(n_groups):
        start = off[g]
        size = off[g + 1] - start
        k = nk[g]
        if k > size:
            k = size
        for j in range(size):
            mind[j] = INFINITY
        cur = sd[g]
        for step in range(k):
            out[pos] = start + cur
            pos += 1
            if step == k - 1:
                break
            px = pts[start + cur, 0]
            py = pts[start + cur, 1]
            pz = pts[start + cur, 2]
            best = -1.0
            best_j = 0
            for j in range(size):
                dx = pts[start + j, 0] - px
                dy = pts[start + j, 1] - py
                dz = pts[start + j, 2] - pz
                dist = dx * dx + dy * dy + dz * dz
                if dist < mind[j]:
                    mind[j] = dist
                if mind[j] > best:
                    best = mind[j]
                    best_j = j
            cur = best_j
    return out_arr[:pos]


cdef inline double _first_positive(double t_near, double t_far) nogil:
    cdef double t = t_near if t_near > EPS_T else t_far
    return t if t > EPS_T else INFINITY


cdef double _hit_plane(const double* o, const double* d, const double* p) nogil:
    if d[2] == 0.0:
        return INFINITY
    cdef double t = (p[0] - o[2]) / d[2]
    return t if t > EPS_T else INFINITY


cdef double _hit_box(const double* o, const double* d, const double* p) nogil:
    cdef double tmin = -INFINITY, tmax = INFINITY, lo, hi, t1, t2
    cdef int a
    for a in range(3):
        lo = p[a] - p[a + 3]
        hi = p[a] + p[a + 3]
        if d[a] == 0.0:
            if o[a] < lo or o[a] > hi:
                return INFINITY
            continue
        t1 = (lo - o[a]) / d[a]
        t2 = (hi - o[a]) / d[a]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    if tmax < tmin:
        return INFINITY
    return _first_positive(tmin, tmax)


cdef double _hit_sphere(const double* o, const double* d, const double* p) nogil:
    cdef double ox = o[0] - p[0], oy = o[1] - p[1], oz = o[2] - p[2]
    cdef double a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    cdef double b = ox * d[0] + oy * d[1] + oz * d[2]
    cdef double c = ox * ox + oy * oy + oz * oz - p[3] * p[3]
    cdef double disc = b * b - a * c
    if disc < 0.0:
        return INFINITY
    cdef double s = sqrt(disc)
    return _first_positive((-b - s) / a, (-b + s) / a)


cdef double _hit_cylinder(const double* o, const double* d, const double* p) nogil:
    cdef double cx = p[0], cy = p[1], z0 = p[2], z1 = p[3], r = p[4]
    cdef double ox = o[0] - cx, oy = o[1] - cy
    cdef double a = d[0] * d[0] + d[1] * d[1]
    cdef double b = ox * d[0] + oy * d[1]
    cdef double c = ox * ox + oy * oy - r * r
    cdef double disc = b * b - a * c
    cdef double best = INFINITY, s, t, zt, px, py, zc
    cdef int i
    if a > 0.0 and disc >= 0.0:
        s = sqrt(disc)
        for i in range(2):
            t = (-b - s) / a if i == 0 else (-b + s) / a
            zt = o[2] + t * d[2]
            if t > EPS_T and zt >= z0 and zt <= z1 and t < best:
                best = t
    if d[2] != 0.0:
        for i in range(2):
            zc = z0 if i == 0 else z1
            t = (zc - o[2]) / d[2]
            px = ox + t * d[0]
            py = oy + t * d[1]
            if t > EPS_T and px * px + py * py <= r * r and t < best:
                best = t
    return best


def raycast(origins, dirs, kinds, params, double t_max):
    cdef const double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const int[::1] kd = np.ascontiguousarray(kinds, dtype=np.int32)
    cdef Py_ssize_t n_prim = kd.shape[0]
    cdef const double[:, ::1] prm = np.ascontiguousarray(params, dtype=np.float64).reshape(n_prim, -1)
    cdef Py_ssize_t n = o.shape[0], r, i
    t_arr = np.full(n, np.inf)
    i_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] best_t = t_arr
    cdef long long[::1] best_i = i_arr
    cdef double t
    cdef int kind
    with nogil:
        for r in range(n):
            for i in range(n_prim):
                kind = kd[i]
                if kind == PLANE:
                    t = _hit_plane(&o[r, 0], &d[r, 0], &prm[i, 0])
                elif kind == BOX:
                    t = _hit_box(&o[r, 0], &d[r, 0], &prm[i, 0])
                elif kind == CYLINDER:
                    t = _hit_cylinder(&o[r, 0], &d[r, 0], &prm[i, 0])
                else:
                    t = _hit_sphere(&o[r, 0], &d[r, 0], &prm[i, 0])
                if t < best_t[r] and t <= t_max:
                    best_t[r] = t
                    best_i[r] = i
    return t_arr, i_arr

"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them operation
for operation so the two backends agree to the last bit on FPS and to
rounding on ray casting.
"""
import numpy as np

PLANE, BOX, CYLINDER, SPHERE = 0, 1, 2, 3

_EPS_T = 1e-9


def fps_groups(points, offsets, seeds, n_keep):
    """Greedy farthest point sampling over CSR-packed groups.

    ``points[offsets[g]:offsets[g + 1]]`` is group ``g``; ``seeds[g]`` is the
    local index of its first pick and ``n_keep[g]`` the number of picks.
    Returns global point indices, concatenated group by group in pick order.
    Ties in the max-min distance go to the lowest local index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    seeds = np.asarray(seeds, dtype=np.int64)
    n_keep = np.asarray(n_keep, dtype=np.int64)
    out = np.empty(int(n_keep.sum()), dtype=np.int64)
    pos = 0
    for g in range(len(offsets) - 1):
        start, stop = offsets[g], offsets[g + 1]
        pts = points[start:stop]
        k = min(int(n_keep[g]), stop - start)
        cur = int(seeds[g])
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        mind = np.full(stop - start, np.inf)
        for step in range(k):
            out[pos] = start + cur
            pos += 1
            if step == k - 1:
                break
            dx = x - pts[cur, 0]
            dy = y - pts[cur, 1]
            dz = z - pts[cur, 2]
            np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
            cur = int(np.argmax(mind))
    return out[:pos]


def _slab(o, d, lo, hi, tmin, tmax):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return np.maximum(tmin, near), np.minimum(tmax, far)


def _first_positive(t_near, t_far, valid):
    t = np.where(t_near > _EPS_T, t_near, t_far)
    return np.where(valid & (t > _EPS_T), t, np.inf)


def _hit_plane(o, d, p):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p[0] - o[:, 2]) / d[:, 2]
    return np.where((d[:, 2] != 0.0) & (t > _EPS_T), t, np.inf)


def _hit_box(o, d, p):
    tmin = np.full(len(o), -np.inf)
    tmax = np.full(len(o), np.inf)
    for a in range(3):
        tmin, tmax = _slab(o[:, a], d[:, a], p[a] - p[a + 3], p[a] + p[a + 3], tmin, tmax)
    return _first_positive(tmin, tmax, tmax >= tmin)


def _hit_sphere(o, d, p):
    ox = o[:, 0] - p[0]
    oy = o[:, 1] - p[1]
    oz = o[:, 2] - p[2]
    a = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    b = ox * d[:, 0] + oy * d[:, 1] + oz * d[:, 2]
    c = ox * ox + oy * oy + oz * oz - p[3] * p[3]
    disc = b * b - a * c
    ok = disc >= 0.0
    s = np.sqrt(np.where(ok, disc, 0.0))
    return _first_positive((-b - s) / a, (-b + s) / a, ok)


def _hit_cylinder(o, d, p):
    cx, cy, z0, z1, r = p[0], p[1], p[2], p[3], p[4]
    ox = o[:, 0] - cx
    oy = o[:, 1] - cy
    a = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    b = ox * d[:, 0] + oy * d[:, 1]
    c = ox * ox + oy * oy - r * r
    disc = b * b - a * c
    side = (a > 0.0) & (disc >= 0.0)
    s = np.sqrt(np.where(side, disc, 0.0))
    a_safe = np.where(a > 0.0, a, 1.0)
    best = np.full(len(o), np.inf)
    for t in ((-b - s) / a_safe, (-b + s) / a_safe):
        zt = o[:, 2] + t * d[:, 2]
        ok = side & (t > _EPS_T) & (zt >= z0) & (zt <= z1)
        best = np.where(ok & (t < best), t, best)
    with np.errstate(divide="ignore", invalid="ignore"):
        for zc in (z0, z1):
            t = (zc - o[:, 2]) / d[:, 2]
            px = ox + t * d[:, 0]
            py = oy + t * d[:, 1]
            ok = (d[:, 2] != 0.0) & (t > _EPS_T) & (px * px + py * py <= r * r)
            best = np.where(ok & (t < best), t, best)
    return best


_HIT = {PLANE: _hit_plane, BOX: _hit_box, CYLINDER: _hit_cylinder, SPHERE: _hit_sphere}


def raycast(origins, dirs, kinds, params, t_max):
    """First hit of each ray against a list of primitives.

    Returns ``(t, prim)`` with ``t = inf`` and ``prim = -1`` for rays that
    hit nothing closer than ``t_max``.
    """
    o = np.ascontiguousarray(origins, dtype=np.float64)
    d = np.ascontiguousarray(dirs, dtype=np.float64)
    kinds = np.asarray(kinds, dtype=np.int32)
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(len(kinds), -1)
    best_t = np.full(len(o), np.inf)
    best_i = np.full(len(o), -1, dtype=np.int64)
    for i, kind in enumerate(kinds):
        t = _HIT[int(kind)](o, d, params[i])
        closer = (t < best_t) & (t <= t_max)
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i

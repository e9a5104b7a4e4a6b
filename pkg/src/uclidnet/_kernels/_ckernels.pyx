# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: k-d tree queries, dense assignment, CSG ray casting.

Signatures and results match :mod:`uclidnet._kernels._pure` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY, fabs

cnp.import_array()

DEF MAX_STACK = 256


def kd_query(const double[:, ::1] points, const long[::1] node_point,
             const int[::1] node_axis, const long[::1] left, const long[::1] right,
             long root, const double[:, ::1] queries):
    cdef Py_ssize_t m = queries.shape[0]
    out_idx = np.empty(m, dtype=np.int64)
    out_d2 = np.empty(m, dtype=np.float64)
    cdef long[::1] oi = out_idx
    cdef double[::1] od = out_d2
    cdef long stack_node[MAX_STACK]
    cdef double stack_bound[MAX_STACK]
    cdef Py_ssize_t sp, q
    cdef long node, p, best_i, near, far
    cdef double qx, qy, qz, best_d, d2, dx, dy, dz, diff, bound
    cdef int ax
    for q in range(m):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        best_d = INFINITY
        best_i = -1
        sp = 0
        stack_node[0] = root
        stack_bound[0] = 0.0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack_node[sp]
            bound = stack_bound[sp]
            if node < 0 or bound > best_d:
                continue
            p = node_point[node]
            dx = points[p, 0] - qx
            dy = points[p, 1] - qy
            dz = points[p, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d or (d2 == best_d and p < best_i):
                best_d = d2
                best_i = p
            ax = node_axis[node]
            if ax == 0:
                diff = qx - points[p, 0]
            elif ax == 1:
                diff = qy - points[p, 1]
            else:
                diff = qz - points[p, 2]
            if diff < 0:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            # far pushed first so near is popped first
            if far >= 0 and sp < MAX_STACK:
                stack_node[sp] = far
                stack_bound[sp] = diff * diff
                sp += 1
            if near >= 0 and sp < MAX_STACK:
                stack_node[sp] = near
                stack_bound[sp] = 0.0
                sp += 1
        oi[q] = best_i
        od[q] = best_d
    return out_idx, out_d2


def assignment(const double[:, ::1] cost):
    """Shortest augmenting path assignment on a square cost matrix."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef long[::1] p = p_arr
    cdef long[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows = np.empty(n, dtype=np.int64)
    cdef long[::1] r = rows
    for j in range(1, n + 1):
        r[p[j] - 1] = j - 1
    return rows


cdef inline void _sphere(double ox, double oy, double oz, double dx, double dy, double dz,
                         const double[:] prm, double *t0, double *t1) nogil:
    cdef double px = ox - prm[0], py = oy - prm[1], pz = oz - prm[2]
    cdef double a = dx * dx + dy * dy + dz * dz
    cdef double b = px * dx + py * dy + pz * dz
    cdef double c = px * px + py * py + pz * pz - prm[3] * prm[3]
    cdef double disc = b * b - a * c
    if disc < 0:
        t0[0] = INFINITY
        t1[0] = -INFINITY
        return
    disc = sqrt(disc)
    t0[0] = (-b - disc) / a
    t1[0] = (-b + disc) / a


cdef inline void _slab(double o, double d, double lo, double hi, double *t0, double *t1) nogil:
    cdef double a, b, tmp
    if d == 0.0:
        if o < lo or o > hi:
            t0[0] = INFINITY
            t1[0] = -INFINITY
        return
    a = (lo - o) / d
    b = (hi - o) / d
    if a > b:
        tmp = a
        a = b
        b = tmp
    if a > t0[0]:
        t0[0] = a
    if b < t1[0]:
        t1[0] = b


cdef inline void _box(double ox, double oy, double oz, double dx, double dy, double dz,
                      const double[:] prm, double *t0, double *t1) nogil:
    t0[0] = -INFINITY
    t1[0] = INFINITY
    _slab(ox, dx, prm[0] - prm[3], prm[0] + prm[3], t0, t1)
    _slab(oy, dy, prm[1] - prm[4], prm[1] + prm[4], t0, t1)
    _slab(oz, dz, prm[2] - prm[5], prm[2] + prm[5], t0, t1)


cdef inline void _cyl_side(double ox, double oy, double oz, double dx, double dy, double dz,
                           double cx, double cy, double cz, double r, int ax,
                           double *t0, double *t1) nogil:
    # infinite cylinder around the axis line through (cx, cy, cz)
    cdef double p0, p1, d0, d1, a, b, c, disc
    if ax == 0:
        p0 = oy - cy; p1 = oz - cz; d0 = dy; d1 = dz
    elif ax == 1:
        p0 = ox - cx; p1 = oz - cz; d0 = dx; d1 = dz
    else:
        p0 = ox - cx; p1 = oy - cy; d0 = dx; d1 = dy
    a = d0 * d0 + d1 * d1
    c = p0 * p0 + p1 * p1 - r * r
    if a == 0.0:
        if c <= 0:
            t0[0] = -INFINITY
            t1[0] = INFINITY
        else:
            t0[0] = INFINITY
            t1[0] = -INFINITY
        return
    b = p0 * d0 + p1 * d1
    disc = b * b - a * c
    if disc < 0:
        t0[0] = INFINITY
        t1[0] = -INFINITY
        return
    disc = sqrt(disc)
    t0[0] = (-b - disc) / a
    t1[0] = (-b + disc) / a


cdef inline void _cylinder(double ox, double oy, double oz, double dx, double dy, double dz,
                           const double[:] prm, double *t0, double *t1) nogil:
    cdef int ax = <int>prm[6]
    _cyl_side(ox, oy, oz, dx, dy, dz, prm[0], prm[1], prm[2], prm[3], ax, t0, t1)
    if t0[0] > t1[0]:
        return
    if ax == 0:
        _slab(ox, dx, prm[0] - prm[4], prm[0] + prm[4], t0, t1)
    elif ax == 1:
        _slab(oy, dy, prm[1] - prm[4], prm[1] + prm[4], t0, t1)
    else:
        _slab(oz, dz, prm[2] - prm[4], prm[2] + prm[4], t0, t1)


cdef inline void _capsule(double ox, double oy, double oz, double dx, double dy, double dz,
                          const double[:] prm, double *t0, double *t1) nogil:
    cdef int ax = <int>prm[6]
    cdef double a0, a1, b0, b1, c0, c1
    cdef double sph[4]
    cdef double ex, ey, ez
    cdef int k
    # side
    _cylinder(ox, oy, oz, dx, dy, dz, prm, &a0, &a1)
    # a ray can meet the infinite side yet miss the slab: drop that empty interval
    if a0 > a1:
        a0 = INFINITY
        a1 = -INFINITY
    t0[0] = a0
    t1[0] = a1
    sph[0] = prm[0]; sph[1] = prm[1]; sph[2] = prm[2]; sph[3] = prm[3]
    for k in range(2):
        ex = prm[0]; ey = prm[1]; ez = prm[2]
        if ax == 0:
            ex = ex + (prm[4] if k == 0 else -prm[4])
        elif ax == 1:
            ey = ey + (prm[4] if k == 0 else -prm[4])
        else:
            ez = ez + (prm[4] if k == 0 else -prm[4])
        _sphere_c(ox, oy, oz, dx, dy, dz, ex, ey, ez, prm[3], &b0, &b1)
        if b0 <= b1:
            if b0 < t0[0]:
                t0[0] = b0
            if b1 > t1[0]:
                t1[0] = b1


cdef inline void _sphere_c(double ox, double oy, double oz, double dx, double dy, double dz,
                           double cx, double cy, double cz, double r,
                           double *t0, double *t1) nogil:
    cdef double px = ox - cx, py = oy - cy, pz = oz - cz
    cdef double a = dx * dx + dy * dy + dz * dz
    cdef double b = px * dx + py * dy + pz * dz
    cdef double c = px * px + py * py + pz * pz - r * r
    cdef double disc = b * b - a * c
    if disc < 0:
        t0[0] = INFINITY
        t1[0] = -INFINITY
        return
    disc = sqrt(disc)
    t0[0] = (-b - disc) / a
    t1[0] = (-b + disc) / a


def ray_intervals(const double[::1] origin, const double[:, ::1] dirs,
                  const int[::1] ptype, const double[:, ::1] params):
    """Entry/exit ray parameters of every primitive for every ray."""
    cdef Py_ssize_t n = dirs.shape[0], k = ptype.shape[0], i, j
    t0_arr = np.empty((k, n))
    t1_arr = np.empty((k, n))
    cdef double[:, ::1] T0 = t0_arr
    cdef double[:, ::1] T1 = t1_arr
    cdef double a, b
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    for j in range(k):
        for i in range(n):
            if ptype[j] == 0:
                _sphere(ox, oy, oz, dirs[i, 0], dirs[i, 1], dirs[i, 2], params[j], &a, &b)
            elif ptype[j] == 1:
                _box(ox, oy, oz, dirs[i, 0], dirs[i, 1], dirs[i, 2], params[j], &a, &b)
            elif ptype[j] == 2:
                _cylinder(ox, oy, oz, dirs[i, 0], dirs[i, 1], dirs[i, 2], params[j], &a, &b)
            else:
                _capsule(ox, oy, oz, dirs[i, 0], dirs[i, 1], dirs[i, 2], params[j], &a, &b)
            if a > b:
                a = INFINITY
                b = -INFINITY
            T0[j, i] = a
            T1[j, i] = b
    return t0_arr, t1_arr


def first_hit(const double[:, ::1] t0, const double[:, ::1] t1, const int[::1] role, double t_min):
    """First ray parameter on the CSG composite boundary.

    Candidates are entries of additive primitives and exits of subtractive
    ones; a candidate is kept if it lies in some additive interval and in no
    open subtractive interval.
    """
    cdef Py_ssize_t k = t0.shape[0], n = t0.shape[1], i, j, l
    hit_arr = np.zeros(n)
    prim_arr = np.full(n, -1, dtype=np.int32)
    cdef double[::1] hit = hit_arr
    cdef int[::1] prim = prim_arr
    cdef double best, c
    cdef int best_j, ok, inside
    for i in range(n):
        best = INFINITY
        best_j = -1
        for j in range(k):
            if role[j] > 0:
                c = t0[j, i]
            else:
                c = t1[j, i]
            if not (c >= t_min) or c >= best or c == INFINITY or c == -INFINITY:
                continue
            inside = 0
            ok = 1
            for l in range(k):
                if role[l] > 0:
                    if t0[l, i] <= c and c <= t1[l, i]:
                        inside = 1
                elif l != j and t0[l, i] < c and c < t1[l, i]:
                    ok = 0
                    break
            if ok and inside:
                best = c
                best_j = j
        if best_j >= 0:
            hit[i] = best
            prim[i] = best_j
    return hit_arr, prim_arr


cdef void _select(const double[:, ::1] pts, long[::1] idx, Py_ssize_t lo, Py_ssize_t hi,
                  Py_ssize_t k, int ax) nogil:
    # Wirth selection on idx[lo:hi]; afterwards idx[k] holds the k-th smallest key
    cdef Py_ssize_t l = lo, r = hi - 1, i, j
    cdef double pivot
    cdef long tmp
    while r > l:
        pivot = pts[idx[k], ax]
        i = l
        j = r
        while i <= j:
            while pts[idx[i], ax] < pivot:
                i += 1
            while pts[idx[j], ax] > pivot:
                j -= 1
            if i <= j:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                i += 1
                j -= 1
        if j < k:
            l = i
        if k < i:
            r = j


cdef long _build(const double[:, ::1] pts, long[::1] idx, Py_ssize_t lo, Py_ssize_t hi,
                 long[::1] node_point, int[::1] node_axis, long[::1] left, long[::1] right,
                 long *counter) nogil:
    cdef long node
    cdef Py_ssize_t i, mid
    cdef double mn[3]
    cdef double mx[3]
    cdef double c, best
    cdef int a, ax
    if lo >= hi:
        return -1
    node = counter[0]
    counter[0] += 1
    for a in range(3):
        mn[a] = INFINITY
        mx[a] = -INFINITY
    for i in range(lo, hi):
        for a in range(3):
            c = pts[idx[i], a]
            if c < mn[a]:
                mn[a] = c
            if c > mx[a]:
                mx[a] = c
    ax = 0
    best = mx[0] - mn[0]
    for a in range(1, 3):
        if mx[a] - mn[a] > best:
            best = mx[a] - mn[a]
            ax = a
    mid = lo + (hi - lo) // 2
    _select(pts, idx, lo, hi, mid, ax)
    node_point[node] = idx[mid]
    node_axis[node] = ax
    left[node] = _build(pts, idx, lo, mid, node_point, node_axis, left, right, counter)
    right[node] = _build(pts, idx, mid + 1, hi, node_point, node_axis, left, right, counter)
    return node


def kd_build(const double[:, ::1] points):
    """Balanced tree: median split on the widest axis.  Returns node arrays and root."""
    cdef Py_ssize_t n = points.shape[0]
    idx_arr = np.arange(n, dtype=np.int64)
    node_point = np.full(n, -1, dtype=np.int64)
    node_axis = np.zeros(n, dtype=np.int32)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    cdef long counter = 0
    cdef long root
    root = _build(points, idx_arr, 0, n, node_point, node_axis, left, right, &counter)
    return node_point, node_axis, left, right, root

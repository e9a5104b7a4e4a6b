"""Interpreted twins of the compiled kernels in ``_ckernels.pyx``.

Same signatures, same results.  The k-d tree query and the assignment solver
keep the compiled loop structure; ray casting is vectorized over rays.
"""
import numpy as np


def kd_query(points, node_point, node_axis, left, right, root, queries):
    m = queries.shape[0]
    out_idx = np.empty(m, dtype=np.int64)
    out_d2 = np.empty(m, dtype=np.float64)
    pts = points.tolist()
    node_point = node_point.tolist()
    node_axis = node_axis.tolist()
    left = left.tolist()
    right = right.tolist()
    for q, (qx, qy, qz) in enumerate(queries.tolist()):
        qv = (qx, qy, qz)
        best_d = np.inf
        best_i = -1
        stack = [(root, 0.0)]
        while stack:
            node, bound = stack.pop()
            if node < 0 or bound > best_d:
                continue
            p = node_point[node]
            px, py, pz = pts[p]
            dx = px - qx
            dy = py - qy
            dz = pz - qz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d or (d2 == best_d and p < best_i):
                best_d = d2
                best_i = p
            ax = node_axis[node]
            diff = qv[ax] - pts[p][ax]
            if diff < 0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            if far >= 0:
                stack.append((far, diff * diff))
            if near >= 0:
                stack.append((near, 0.0))
        out_idx[q] = best_i
        out_d2[q] = best_d
    return out_idx, out_d2


def assignment(cost):
    """Shortest augmenting path assignment on a square cost matrix."""
    n = cost.shape[0]
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
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
    rows[p[1:] - 1] = np.arange(n)
    return rows


def _sphere_c(o, d, center, r):
    p = o - center
    a = np.einsum("ij,ij->i", d, d)
    b = d @ p
    c = p @ p - r * r
    disc = b * b - a * c
    ok = disc >= 0
    s = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.where(ok, (-b - s) / a, np.inf)
    t1 = np.where(ok, (-b + s) / a, -np.inf)
    return t0, t1


def _slab(o, d, lo, hi, t0, t1):
    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - o) / d
        b = (hi - o) / d
    lo_t = np.minimum(a, b)
    hi_t = np.maximum(a, b)
    t0 = np.where(zero, t0, np.maximum(t0, lo_t))
    t1 = np.where(zero, t1, np.minimum(t1, hi_t))
    outside = zero & ((o < lo) | (o > hi))
    t0 = np.where(outside, np.inf, t0)
    t1 = np.where(outside, -np.inf, t1)
    return t0, t1


def _box(o, d, prm):
    n = d.shape[0]
    t0 = np.full(n, -np.inf)
    t1 = np.full(n, np.inf)
    for k in range(3):
        t0, t1 = _slab(o[k], d[:, k], prm[k] - prm[3 + k], prm[k] + prm[3 + k], t0, t1)
    return t0, t1


def _cylinder(o, d, prm):
    ax = int(prm[6])
    other = [k for k in range(3) if k != ax]
    p = o[other] - prm[other]
    dd = d[:, other]
    a = np.einsum("ij,ij->i", dd, dd)
    c = p @ p - prm[3] * prm[3]
    b = dd @ p
    disc = b * b - a * c
    parallel = a == 0.0
    ok = (disc >= 0) & ~parallel
    s = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(ok, (-b - s) / a, np.inf)
        t1 = np.where(ok, (-b + s) / a, -np.inf)
    t0 = np.where(parallel, -np.inf if c <= 0 else np.inf, t0)
    t1 = np.where(parallel, np.inf if c <= 0 else -np.inf, t1)
    miss = t0 > t1
    s0, s1 = _slab(o[ax], d[:, ax], prm[ax] - prm[4], prm[ax] + prm[4], t0, t1)
    return np.where(miss, t0, s0), np.where(miss, t1, s1)


def _capsule(o, d, prm):
    ax = int(prm[6])
    t0, t1 = _cylinder(o, d, prm)
    # a ray can meet the infinite side yet miss the slab: drop that empty interval
    empty = t0 > t1
    t0 = np.where(empty, np.inf, t0)
    t1 = np.where(empty, -np.inf, t1)
    for sgn in (1.0, -1.0):
        e = prm[:3].copy()
        e[ax] = e[ax] + (prm[4] if sgn > 0 else -prm[4])
        b0, b1 = _sphere_c(o, d, e, prm[3])
        hit = b0 <= b1
        t0 = np.where(hit & (b0 < t0), b0, t0)
        t1 = np.where(hit & (b1 > t1), b1, t1)
    return t0, t1


def ray_intervals(origin, dirs, ptype, params):
    """Entry/exit ray parameters of every primitive for every ray."""
    k = ptype.shape[0]
    n = dirs.shape[0]
    T0 = np.empty((k, n))
    T1 = np.empty((k, n))
    for j in range(k):
        prm = params[j]
        if ptype[j] == 0:
            a, b = _sphere_c(origin, dirs, prm[:3], prm[3])
        elif ptype[j] == 1:
            a, b = _box(origin, dirs, prm)
        elif ptype[j] == 2:
            a, b = _cylinder(origin, dirs, prm)
        else:
            a, b = _capsule(origin, dirs, prm)
        miss = a > b
        T0[j] = np.where(miss, np.inf, a)
        T1[j] = np.where(miss, -np.inf, b)
    return T0, T1


def first_hit(t0, t1, role, t_min):
    """First ray parameter on the CSG composite boundary."""
    k, n = t0.shape
    pos = role > 0
    cand = np.where(pos[:, None], t0, t1)
    best = np.full(n, np.inf)
    prim = np.full(n, -1, dtype=np.int32)
    for j in range(k):
        c = cand[j]
        valid = (c >= t_min) & np.isfinite(c) & (c < best)
        inside = np.zeros(n, dtype=bool)
        blocked = np.zeros(n, dtype=bool)
        for l in range(k):
            if pos[l]:
                inside |= (t0[l] <= c) & (c <= t1[l])
            elif l != j:
                blocked |= (t0[l] < c) & (c < t1[l])
        keep = valid & inside & ~blocked
        best = np.where(keep, c, best)
        prim = np.where(keep, j, prim).astype(np.int32)
    hit = np.where(prim >= 0, best, 0.0)
    return hit, prim


def kd_build(points):
    """Balanced tree: median split on the widest axis.  Returns node arrays and root."""
    n = points.shape[0]
    node_point = np.full(n, -1, dtype=np.int64)
    node_axis = np.zeros(n, dtype=np.int32)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    counter = 0

    def build(idx):
        nonlocal counter
        if len(idx) == 0:
            return -1
        node = counter
        counter += 1
        sub = points[idx]
        ax = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        mid = len(idx) // 2
        idx = idx[np.argpartition(sub[:, ax], mid, kind="introselect")]
        node_point[node] = idx[mid]
        node_axis[node] = ax
        left[node] = build(idx[:mid])
        right[node] = build(idx[mid + 1:])
        return node

    root = build(np.arange(n, dtype=np.int64))
    return node_point, node_axis, left, right, root

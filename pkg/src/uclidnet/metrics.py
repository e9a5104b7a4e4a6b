"""Point-cloud distances, scores and the training losses."""
from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .geometry import voxelize_points
from .spatial import SpatialIndex
from .tensor import Tensor, bce_mean, gather_rows, mul, square, sub, sum as tsum

log = logging.getLogger(__name__)

EXACT_EMD_MAX = 256
SINKHORN_EPS = 1e-3
FSCORE_THRESHOLD = 0.1
SIOU_RESOLUTION = 50

# reporting-only scale factors
CD_L2_SCALE = 1e3
EMD_SCALE = 1e2


def _cloud(x, name="cloud"):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError(f"{name} is empty")
    return x


def nearest_sq(x, y, index_y=None):
    """Squared distance from each point of ``x`` to its nearest point in ``y``."""
    index_y = index_y or SpatialIndex(y)
    return index_y.query_sq(x)[1]


def chamfer_l1(x, y):
    """Mean nearest Euclidean distance X->Y plus Y->X."""
    x, y = _cloud(x, "X"), _cloud(y, "Y")
    return float(np.sqrt(nearest_sq(x, y)).mean() + np.sqrt(nearest_sq(y, x)).mean())


def chamfer_l2(x, y):
    """Mean nearest squared distance X->Y plus Y->X."""
    x, y = _cloud(x, "X"), _cloud(y, "Y")
    return float(nearest_sq(x, y).mean() + nearest_sq(y, x).mean())


def _pairwise(x, y):
    d = x[:, None, :] - y[None, :, :]
    return np.sqrt((d * d).sum(axis=2))


def emd(x, y, mode="exact", eps=SINKHORN_EPS, backend=None):
    """Earth mover's distance under uniform masses.

    ``exact`` solves the assignment problem (equal sizes, at most 256 points).
    ``approx`` runs log-domain Sinkhorn with regularization ``eps`` (in distance
    units) and rounds the plan onto the transport polytope, so the returned
    cost is that of a feasible plan and never below the optimum.
    """
    x, y = _cloud(x, "X"), _cloud(y, "Y")
    cost = np.ascontiguousarray(_pairwise(x, y))
    if mode == "exact":
        if len(x) != len(y):
            raise ValueError(f"exact EMD needs equal sizes, got {len(x)} and {len(y)}")
        if len(x) > EXACT_EMD_MAX:
            raise ValueError(f"exact EMD is capped at {EXACT_EMD_MAX} points; use mode='approx'")
        cols = _kernels.get_backend(backend).assignment(cost)
        return float(cost[np.arange(len(x)), cols].mean())
    if mode == "approx":
        return float((sinkhorn_plan(cost, eps) * cost).sum())
    raise ValueError(f"unknown EMD mode {mode!r}")


def sinkhorn_plan(cost, eps=SINKHORN_EPS, tol=1e-5, max_iter=300):
    """Entropic transport plan between uniform marginals, rounded to be feasible.

    ``eps`` is annealed down from the largest cost by halving; each stage runs
    at most ``max_iter`` iterations or until the row marginals are within
    ``tol`` in L1.  The rounding step absorbs the residual infeasibility.
    """
    n, m = cost.shape
    loga = np.full(n, -np.log(n))
    logb = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    a = np.full(n, 1.0 / n)
    stage = max(float(cost.max()), eps)
    while True:
        for it in range(max_iter):
            f = stage * (loga - logsumexp((g[None, :] - cost) / stage, axis=1))
            g = stage * (logb - logsumexp((f[:, None] - cost) / stage, axis=0))
            if it % 10 == 9:
                rows = np.exp(logsumexp((f[:, None] + g[None, :] - cost) / stage, axis=1))
                if np.abs(rows - a).sum() < tol:
                    break
        if stage <= eps:
            break
        stage = max(stage / 2.0, eps)
    plan = np.exp((f[:, None] + g[None, :] - cost) / stage)
    return _round_plan(plan, a, np.full(m, 1.0 / m))


def _round_plan(plan, a, b):
    r = plan.sum(axis=1)
    plan = plan * np.minimum(a / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = plan.sum(axis=0)
    plan = plan * np.minimum(b / np.where(c > 0, c, 1.0), 1.0)[None, :]
    er = a - plan.sum(axis=1)
    ec = b - plan.sum(axis=0)
    mass = er.sum()
    if mass > 0:
        plan = plan + np.outer(er, ec) / mass
    return plan


def fscore(pred, gt, d=FSCORE_THRESHOLD):
    """Harmonic mean (in percent) of precision and recall at distance ``d``."""
    if d <= 0:
        raise ValueError("threshold must be positive")
    pred, gt = _cloud(pred, "prediction"), _cloud(gt, "ground truth")
    precision = 100.0 * (np.sqrt(nearest_sq(pred, gt)) <= d).mean()
    recall = 100.0 * (np.sqrt(nearest_sq(gt, pred)) <= d).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def siou(xa, xb, res=SIOU_RESOLUTION):
    """Intersection over union of the voxelized surfaces at ``res^3``."""
    va = voxelize_points(_cloud(xa, "X_a"), res) > 0
    vb = voxelize_points(_cloud(xb, "X_b"), res) > 0
    union = np.count_nonzero(va | vb)
    if union == 0:
        raise ValueError("both voxelizations are empty")
    return np.count_nonzero(va & vb) / union


def normalize_for_eval(cloud, frame="unit-sphere"):
    """Isotropic rescale into the evaluation frame.

    ``unit-sphere``: centroid at the origin, max point norm 1.
    ``half-box``: bounding-box center at the origin, fitted to [-0.5, 0.5]^3.
    """
    x = _cloud(cloud)
    if frame == "unit-sphere":
        c = x.mean(axis=0)
        r = np.sqrt(((x - c) ** 2).sum(axis=1)).max()
        if r == 0:
            raise ValueError("degenerate cloud: zero extent")
        return (x - c) / r
    if frame == "half-box":
        lo, hi = x.min(axis=0), x.max(axis=0)
        half = (hi - lo).max()
        if half == 0:
            raise ValueError("degenerate cloud: zero extent")
        return (x - (lo + hi) / 2.0) / half
    raise ValueError(f"unknown frame {frame!r}")


def bce_occupancy(pred, target):
    """Per-voxel mean binary cross-entropy with the 1e-7 probability clamp."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())


def chamfer_l2_tensor(points: Tensor, gt, gt_index=None) -> Tensor:
    """Differentiable Chamfer-L2 between predicted ``points`` [M, 3] and fixed ``gt``.

    Nearest-neighbor assignments are constants of the backward pass.
    """
    gt = _cloud(gt, "ground truth")
    gt_index = gt_index or SpatialIndex(gt)
    px = points.data.astype(np.float64)
    i_pg = gt_index.query_sq(px)[0]
    i_gp = SpatialIndex(px).query_sq(gt)[0]
    target = gt[i_pg].astype(points.dtype)
    d1 = tsum(square(sub(points, target)))
    d2 = tsum(square(sub(gather_rows(points, i_gp), gt.astype(points.dtype))))
    return mul(d1, 1.0 / len(px)) + mul(d2, 1.0 / len(gt))


def training_loss(occ: Tensor, occ_gt, points: Tensor | None, gt_cloud, w_bce=1.0, w_cd=1.0,
                  gt_index=None):
    """``w_bce * BCE + w_cd * Chamfer-L2``; returns ``(total, bce, chamfer)`` tensors.

    With no predicted points the Chamfer term is dropped (``chamfer`` is None).
    """
    bce = bce_mean(occ, occ_gt)
    total = mul(bce, w_bce)
    cd = None
    if points is None or len(points.data) == 0:
        log.warning("no voxel above threshold; Chamfer term omitted")
    else:
        cd = chamfer_l2_tensor(points, gt_cloud, gt_index)
        if w_cd != 0:
            total = total + mul(cd, w_cd)
    return total, bce, cd

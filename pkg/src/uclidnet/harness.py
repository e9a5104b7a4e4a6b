"""Inference, evaluation and two-view fusion drivers over checkpoints."""
from __future__ import annotations

import logging

import numpy as np

from . import formats, metrics, net, scenes
from .tensor import no_grad
from .train import Checkpoint, Dataset

log = logging.getLogger(__name__)

EVAL_EMD_POINTS = 256


def _dataset(ck: Checkpoint, gt_points=2048):
    return Dataset(ck.config, gt_points)


def _inputs(data: Dataset, seed, view):
    if view < 0:
        raise ValueError(f"view index must be non-negative, got {view}")
    v = data.view(seed, view)
    return v.view.image, v.view.depth, v.view.camera, v.dgrids


def reconstruct(ck: Checkpoint, scene_seed: int, view: int, use_depth=True, data=None,
                out=None) -> net.Reconstruction:
    """Single-view forward with ground-truth pose and depth; optionally writes a PLY."""
    data = data or _dataset(ck)
    image, depth, cam, dgrids = _inputs(data, scene_seed, view)
    with no_grad():
        rec = net.forward(image, depth, cam, ck.params, ck.config, use_depth=use_depth, dgrids=dgrids)
    if out is not None:
        formats.write_ply(out, rec.points, rec.tags)
    return rec


def fuse(ck: Checkpoint, scene_seed: int, view_a: int, view_b: int, use_depth=True, data=None,
         out=None) -> net.Reconstruction:
    """Lift two views of one scene, sum their grids and decode once."""
    data = data or _dataset(ck)
    grids = []
    with no_grad():
        for v in (view_a, view_b):
            image, depth, cam, dgrids = _inputs(data, scene_seed, v)
            g = net.lift(net.encode(image, ck.params, ck.config), depth, cam, ck.config, dgrids)
            if not use_depth:
                g = [(f, np.zeros_like(d)) for f, d in g]
            grids.append(g)
        fused = net.fuse_views(*grids)
        rec = net.heads(net.decode(fused, ck.params, ck.config), ck.params, ck.config)
    if out is not None:
        formats.write_ply(out, rec.points, rec.tags)
    return rec


def _subsample(cloud, n, seed):
    if len(cloud) <= n:
        return cloud
    idx = np.sort(np.random.default_rng([seed, 0xE3D]).choice(len(cloud), size=n, replace=False))
    return cloud[idx]


def score(pred, gt, seed=0):
    """Reported metric tuple ``(cd_l1, cd_l2 x1e3, emd x1e2, F@5%, sIoU)``.

    CD-L1 is taken in the half-box frame, everything else in the unit-sphere
    frame. EMD is exact on deterministic equal-size subsamples of at most 256 points.
    """
    p = metrics.normalize_for_eval(pred)
    g = metrics.normalize_for_eval(gt)
    k = min(EVAL_EMD_POINTS, len(p), len(g))
    e = metrics.emd(_subsample(p, k, seed), _subsample(g, k, seed))
    l1 = metrics.chamfer_l1(metrics.normalize_for_eval(pred, "half-box"),
                            metrics.normalize_for_eval(gt, "half-box"))
    return (l1,
            metrics.chamfer_l2(p, g) * metrics.CD_L2_SCALE,
            e * metrics.EMD_SCALE,
            metrics.fscore(p, g),
            metrics.siou(p, g))


def evaluate(ck: Checkpoint, seeds, view=0, use_depth=True, data=None, out=None):
    """Per-scene metric rows plus a final ``mean`` row; failed scenes get ``None``."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("empty seed range")
    data = data or _dataset(ck)
    rows = []
    for s in seeds:
        rec = reconstruct(ck, s, view, use_depth, data)
        if len(rec.points) == 0:
            log.warning("scene %d: empty reconstruction", s)
            rows.append((str(s), None))
            continue
        try:
            rows.append((str(s), score(rec.points, data.scene(s).cloud, s)))
        except ValueError as e:
            log.warning("scene %d: %s", s, e)
            rows.append((str(s), None))
    good = [v for _, v in rows if v is not None]
    rows.append(("mean", tuple(np.mean(good, axis=0)) if good else None))
    if out is not None:
        formats.write_metrics_csv(out, rows)
    return rows


def chamfer_to_gt(rec: net.Reconstruction, data: Dataset, seed):
    """Training-frame Chamfer-L2 against the scene's GT cloud; inf when empty."""
    if len(rec.points) == 0:
        return float("inf")
    return metrics.chamfer_l2(rec.points, data.scene(seed).cloud)


def occupancy_accuracy(ck: Checkpoint, pairs, data=None, use_depth=True):
    """Mean voxel agreement of ``Õ > τ`` with the GT grids over (scene, view) pairs."""
    data = data or _dataset(ck)
    acc = []
    for s, v in pairs:
        rec = reconstruct(ck, s, v, use_depth, data)
        acc.append(np.mean((rec.occupancy > ck.config.tau) == (data.scene(s).occupancy > 0.5)))
    return float(np.mean(acc))


def gt_self_rows(seeds, gt_points=2048, spec=None):
    """Metric rows of each GT cloud against itself (sanity path)."""
    spec = spec or scenes.SceneSpec()
    rows = []
    for s in seeds:
        c = scenes.sample_surface(scenes.sample_scene(s, spec), gt_points, s)
        rows.append((str(s), score(c, c, s)))
    return rows

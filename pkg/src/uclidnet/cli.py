"""Command-line entry point: gen, train, reconstruct, eval, fuse, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import formats, gradcheck, harness, net, scenes, train
from .tensor import corrupt_gradient

log = logging.getLogger("uclidnet")


def _views(args, need):
    views = args.view or []
    if len(views) < need:
        raise SystemExit(f"error: {args.command} needs {need} --view value(s)")
    return views


def _train_config(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            tc, nc = train.load_train_config(fh.read())
    else:
        tc, nc = train.TrainConfig(), None
    kw = {}
    if args.preset:
        kw["preset"] = args.preset
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.iters is not None:
        kw["iterations"] = args.iters
    if args.scene is not None:
        kw["scene_start"] = args.scene
    tc = replace(tc, **kw)
    if nc is None or "preset" in kw:
        nc = net.PRESETS[tc.preset]
    return tc, nc


def cmd_gen(args):
    preset = args.preset or "desk"
    config = net.PRESETS[preset]
    data = train.Dataset(config)
    seed = 0 if args.scene is None else args.scene
    views = args.view if args.view else list(range(train.TrainConfig().n_views))
    tensors = {"scene/gt_cloud": data.scene(seed).cloud,
               "scene/occupancy": data.scene(seed).occupancy}
    for v in views:
        rv = data.view(seed, v).view
        c = rv.camera
        tensors[f"view{v}/image"] = rv.image
        tensors[f"view{v}/depth"] = rv.depth
        tensors[f"view{v}/camera"] = np.concatenate(
            [c.rotation.ravel(), c.center, [c.focal, c.cx, c.cy, c.height, c.width]])
    with open(args.out, "wb") as fh:
        fh.write(formats.dump_archive(tensors))
    print(f"scene {seed}: wrote {len(views)} view(s) to {args.out}")
    return 0


def cmd_train(args):
    tc, nc = _train_config(args)

    def progress(row, _):
        if row.iteration % 50 == 0 or row.iteration == tc.iterations - 1:
            log.info("it %d %s lr %.0e bce %.4f cd %.5f total %.4f", row.iteration, row.phase,
                     row.lr, row.bce, row.chamfer, row.total)

    try:
        ck, rows = train.train(tc, nc, callback=progress)
    except train.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    out = args.out or "model.ucld"
    train.save_checkpoint(out, ck)
    train.write_log(out + ".log.csv", rows)
    print(f"wrote {out} after {ck.iteration} iterations; final total {rows[-1].total:.5f}")
    return 0


def _load(args):
    if not args.ckpt:
        raise SystemExit(f"error: {args.command} needs --ckpt")
    return train.load_checkpoint(args.ckpt)


def cmd_reconstruct(args):
    ck = _load(args)
    (view,) = _views(args, 1)[:1]
    rec = harness.reconstruct(ck, args.scene or 0, view, use_depth=not args.cam, out=args.out or "recon.ply")
    print(f"{len(rec.points)} points from {int((rec.occupancy > ck.config.tau).sum())} voxels")
    return 0


def cmd_fuse(args):
    ck = _load(args)
    a, b = _views(args, 2)[:2]
    rec = harness.fuse(ck, args.scene or 0, a, b, use_depth=not args.cam, out=args.out or "fused.ply")
    print(f"{len(rec.points)} points from {int((rec.occupancy > ck.config.tau).sum())} voxels")
    return 0


def cmd_eval(args):
    ck = _load(args)
    start = 0 if args.scene is None else args.scene
    view = args.view[0] if args.view else 0
    rows = harness.evaluate(ck, range(start, start + args.count), view, use_depth=not args.cam,
                            out=args.out or "metrics.csv")
    failed = sum(v is None for _, v in rows[:-1])
    print(f"evaluated {len(rows) - 1} scene(s), {failed} failed")
    return 0


def cmd_gradcheck(args):
    seeds = range(args.seed or 0, (args.seed or 0) + args.count)
    if args.corrupt:
        with corrupt_gradient(args.corrupt):
            report = gradcheck.run(seeds)
    else:
        report = gradcheck.run(seeds)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="uclidnet", description="Desk-scale grid-lifting shape reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config")
    common.add_argument("--ckpt")
    common.add_argument("--out")
    common.add_argument("--scene", type=int)
    common.add_argument("--view", type=int, action="append", help="repeat for fuse")
    common.add_argument("--iters", type=int)
    common.add_argument("--preset", choices=sorted(net.PRESETS))
    common.add_argument("--cam", action="store_true", help="zero the depth grids")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, fn, extra in (("gen", cmd_gen, None), ("train", cmd_train, None),
                            ("reconstruct", cmd_reconstruct, None), ("eval", cmd_eval, "count"),
                            ("fuse", cmd_fuse, None), ("gradcheck", cmd_gradcheck, "gradcheck")):
        sp = sub.add_parser(name, parents=[common])
        sp.set_defaults(func=fn)
        if extra == "count":
            sp.add_argument("--count", type=int, default=8, help="number of scene seeds")
        if extra == "gradcheck":
            sp.add_argument("--count", type=int, default=len(gradcheck.SEEDS), help="number of seeds")
            sp.add_argument("--corrupt", help=argparse.SUPPRESS)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

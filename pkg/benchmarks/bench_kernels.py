"""Time the compiled kernels against the interpreted fallback.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints one line per kernel with the best wall time of each backend and the
speedup.  Both backends are run on identical inputs and their outputs are
compared before timing is reported.
"""
import argparse
import time

import numpy as np

from uclidnet import _kernels, scenes
from uclidnet.spatial import SpatialIndex


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases():
    rng = np.random.default_rng(0)
    cloud = rng.normal(size=(2048, 3))
    queries = rng.normal(size=(4096, 3))
    cost = rng.random((128, 128))
    sc = scenes.sample_scene(3)
    cam = scenes.sample_camera(3)

    def kd(name):
        return SpatialIndex(cloud, name).query_sq(queries)[0]

    def hungarian(name):
        return np.asarray(_kernels.get_backend(name).assignment(cost))

    def raycast(name):
        return scenes.cast(sc, cam, name)[0]

    return [("kd-tree 2048 pts x 4096 queries", kd),
            ("assignment 128 x 128", hungarian),
            ("ray cast 64 x 64 px", raycast)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels.compiled is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':34s} {'pure s':>9s} {'compiled s':>11s} {'speedup':>8s}")
    for label, fn in cases():
        tp, outp = best_of(lambda: fn("pure"), args.repeat)
        if _kernels.compiled is None:
            print(f"{label:34s} {tp:9.4f} {'-':>11s} {'-':>8s}")
            continue
        tc, outc = best_of(lambda: fn("compiled"), args.repeat)
        if not np.allclose(outp, outc, rtol=0, atol=1e-12):
            raise SystemExit(f"{label}: backends disagree")
        print(f"{label:34s} {tp:9.4f} {tc:11.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()

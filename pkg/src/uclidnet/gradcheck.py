"""Central finite-difference checks of every differentiable op and a composed micro-model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from . import tensor as T
from .geometry import CameraModel
from .metrics import chamfer_l2_tensor, training_loss
from .tensor import Tensor

RTOL = 1e-4
STEP = 1e-4
# the composed model has ReLU pre-activations within ~1e-5 of zero, so its step is chosen per entry
MICRO_STEPS = (1e-4, 3e-5, 1e-5, 3e-6, 1e-6)
SEEDS = (0, 1, 2, 3, 4)


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel: float
    passed: bool


@dataclass
class Report:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def worst(self):
        out = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_rel)
        return out

    def failures(self):
        return [r for r in self.results if not r.passed]

    def lines(self):
        bad = {(r.name) for r in self.failures()}
        out = [f"{'FAIL' if k in bad else 'ok  '} {k:<24} max rel err {v:.3e}" for k, v in self.worst().items()]
        for r in self.failures():
            out.append(f"failure: {r.name} seed {r.seed} rel err {r.max_rel:.3e}")
        out.append(f"{len(self.results)} checks in {self.seconds:.1f}s: {'PASS' if self.passed else 'FAIL'}")
        return out


def stable_central(at, steps):
    """Central difference at the largest step whose estimate agrees with the next smaller one.

    Agreement means the neighborhood is smooth at that scale (no ReLU kink
    or nearest-neighbor switch inside it); falls back to the smallest step.
    """
    prev = None
    for h in steps:
        est = (at(h) - at(-h)) / (2 * h)
        if prev is not None and abs(prev - est) <= 1e-7 * max(abs(est), 1e-3):
            return prev
        prev = est
    return prev


def check_function(fn, inputs, probe=None, rng=None, h=STEP):
    """Max relative error between backprop and central differences.

    ``fn`` maps a list of leaf tensors to a scalar tensor.  ``probe`` limits
    the number of perturbed entries per input.  ``h`` is a step or a tuple of
    candidate steps for :func:`stable_central`.
    """
    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    fn(leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if probe is not None and flat.size > probe:
            idx = rng.choice(flat.size, size=probe, replace=False)
        for j in idx:
            def at(delta):
                vals = [x.copy() for x in inputs]
                vals[i].reshape(-1)[j] += delta
                with T.no_grad():
                    return float(fn([Tensor(v, dtype=np.float64) for v in vals]).data)
            num = stable_central(at, h) if isinstance(h, tuple) else (at(h) - at(-h)) / (2 * h)
            worst = max(worst, float(rel_error(analytic.reshape(-1)[j], num)))
    return worst


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return T.sum(T.mul(out, w))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _bilinear_coords(rng, p, h, w):
    c = np.stack([rng.uniform(-0.5, w - 0.5, p), rng.uniform(-0.5, h - 0.5, p)], axis=1)
    # keep samples off cell edges and the map border, where the map is not smooth
    c = np.floor(c) + np.clip(c - np.floor(c), 0.05, 0.95)
    return c


def op_cases(rng):
    """(name, fn, inputs, probe) per differentiable op."""
    n = rng.normal
    cases = []

    def case(name, fn, *inputs, probe=None):
        w_rng = np.random.default_rng(rng.integers(1 << 31))
        w_state = w_rng.bit_generator.state

        def scalar(ts):
            w_rng.bit_generator.state = w_state
            out = fn(ts)
            return out if out.data.size == 1 and out.ndim == 0 else _weighted(out, w_rng)
        cases.append((name, scalar, [np.asarray(x, dtype=np.float64) for x in inputs], probe))

    case("add", lambda t: T.add(t[0], t[1]), n(size=(3, 4)), n(size=(4,)))
    case("sub", lambda t: T.sub(t[0], t[1]), n(size=(3, 4)), n(size=(3, 1)))
    case("mul", lambda t: T.mul(t[0], t[1]), n(size=(3, 4)), n(size=(3, 4)))
    case("square", lambda t: T.square(t[0]), n(size=(5,)))
    case("relu", lambda t: T.relu(t[0]), _away_from_zero(rng, (4, 5)))
    case("sigmoid", lambda t: T.sigmoid(t[0]), n(size=(6,)))
    case("log", lambda t: T.log(t[0]), rng.uniform(0.2, 2.0, size=(6,)))
    case("sum", lambda t: T.sum(t[0]), n(size=(3, 3)))
    case("mean", lambda t: T.mean(t[0]), n(size=(3, 3)))
    case("reshape", lambda t: T.reshape(t[0], (6, 2)), n(size=(3, 4)))
    case("transpose", lambda t: T.transpose(t[0]), n(size=(3, 4)))
    case("slice", lambda t: t[0][1:, ::2], n(size=(4, 5)))
    case("concat", lambda t: T.concat([t[0], t[1]], axis=1), n(size=(2, 3)), n(size=(2, 2)))
    case("gather", lambda t: T.gather_rows(t[0], np.array([2, 0, 2, 1])), n(size=(3, 2)))
    case("repeat", lambda t: T.repeat_rows(t[0], 3), n(size=(2, 3)))
    case("linear", lambda t: T.linear(t[0], t[1], t[2]), n(size=(5, 3)), n(size=(2, 3)), n(size=(2,)))
    case("conv2d", lambda t: T.conv2d(t[0], t[1], t[2], stride=1, padding=1),
         n(size=(2, 5, 5)), n(size=(3, 2, 3, 3)), n(size=(3,)))
    case("conv2d_stride2", lambda t: T.conv2d(t[0], t[1], stride=2, padding=1),
         n(size=(2, 6, 6)), n(size=(2, 2, 3, 3)))
    case("conv3d", lambda t: T.conv3d(t[0], t[1], t[2], padding=1),
         n(size=(2, 4, 4, 4)), n(size=(2, 2, 3, 3, 3)), n(size=(2,)), probe=24)
    case("conv_transpose3d", lambda t: T.conv_transpose3d(t[0], t[1], t[2], stride=2, padding=1, output_padding=1),
         n(size=(2, 3, 3, 3)), n(size=(2, 2, 3, 3, 3)), n(size=(2,)), probe=24)
    case("instance_norm", lambda t: T.instance_norm(t[0], t[1], t[2]),
         n(size=(2, 3, 4)), n(size=(2,)), n(size=(2,)))
    coords = _bilinear_coords(rng, 12, 5, 6)
    case("bilinear_sample2d", lambda t: T.bilinear_sample2d(t[0], coords), n(size=(2, 5, 6)))
    target = (rng.random((3, 4)) > 0.5).astype(np.float64)
    case("bce", lambda t: T.bce_mean(T.sigmoid(t[0]), target), n(size=(3, 4)))
    gt = rng.uniform(-1, 1, size=(9, 3))
    case("chamfer_l2", lambda t: chamfer_l2_tensor(t[0], gt), rng.uniform(-1, 1, size=(7, 3)))
    return cases


MICRO = net.NetConfig(
    image_size=16,
    grid_sizes=(4, 4, 2, 1),
    out_grid=4,
    stage_channels=(3, 3, 3, 4),
    feature_channels=(2, 2, 2, 3),
    decoder_channels=(5, 3, 3, 3),
    occ_channels=2,
    fold_hidden=4,
    n_lambda=2,
    tau=0.0,
)


def micro_case(seed):
    """Encoder -> lift -> decode -> heads -> loss on a tiny config; all params probed."""
    rng = np.random.default_rng(seed)
    params = net.init_params(MICRO, seed, dtype=np.float64)
    names = list(params)
    # zero-initialized biases sit exactly on ReLU kinks behind dead units; jitter to a generic point
    for k in names:
        params[k].data += rng.normal(0.0, 0.1, size=params[k].shape)
    image = rng.random((3, 16, 16))
    cam = CameraModel.look_at([0.3, -0.2, 3.2], focal=10.0, height=16, width=16)
    depth = np.zeros((16, 16))
    depth[4:12, 4:12] = 3.2
    occ_gt = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
    gt = rng.uniform(-1, 1, size=(12, 3))

    def fn(ts):
        p = dict(zip(names, ts))
        rec = net.forward(image, depth, cam, p, MICRO)
        total, _, _ = training_loss(rec.occ_tensor, occ_gt, rec.points_tensor, gt)
        return total

    return fn, [params[k].data.copy() for k in names]


def run(seeds=SEEDS, rtol=RTOL, micro_probe=3, include_micro=True) -> Report:
    report = Report()
    t0 = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs, probe in op_cases(rng):
            err = check_function(fn, inputs, probe, rng)
            report.results.append(CheckResult(name, seed, err, err <= rtol))
        if include_micro:
            fn, inputs = micro_case(seed)
            err = check_function(fn, inputs, micro_probe, rng, h=MICRO_STEPS)
            report.results.append(CheckResult("micro_model", seed, err, err <= rtol))
    report.seconds = time.perf_counter() - t0
    return report

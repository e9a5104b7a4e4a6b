"""Training data, the optimization loop and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import formats, net, scenes
from .metrics import training_loss
from .optim import AdamState, adam_step
from .spatial import SpatialIndex

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration, cause):
        super().__init__(f"non-finite value at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    iterations: int = 2000
    batch_size: int = 1
    lr: float = 1e-3
    lr_final: float = 1e-4
    # fraction of the run after which lr_final applies
    lr_drop: float = 2.0 / 3.0
    # BCE-only phase; one pass over the 8 x 12 training views
    pretrain_iters: int = 96
    scene_start: int = 0
    n_scenes: int = 8
    n_views: int = 12
    gt_points: int = 2048
    seed: int = 0
    # extra two-view iterations appended after the main run
    fuse_iters: int = 0
    use_depth: bool = True

    def __post_init__(self):
        if self.preset not in net.PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        for name in ("iterations", "batch_size", "n_scenes", "n_views", "gt_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.lr_drop <= 1.0:
            raise ValueError("lr_drop must lie in (0, 1]")
        if self.pretrain_iters < 0 or self.fuse_iters < 0 or self.scene_start < 0:
            raise ValueError("counts must be non-negative")

    @property
    def scene_seeds(self):
        return list(range(self.scene_start, self.scene_start + self.n_scenes))

    def lr_at(self, iteration):
        return self.lr if iteration < math.ceil(self.lr_drop * self.iterations) else self.lr_final


def camera_config(config: net.NetConfig) -> scenes.CameraConfig:
    """Desk camera scaled to the network's image extent (same field of view)."""
    base = scenes.CameraConfig()
    k = config.image_size / base.width
    return replace(base, height=config.image_size, width=config.image_size, focal=base.focal * k)


# --- data -------------------------------------------------------------------

@dataclass
class SceneData:
    seed: int
    scene: scenes.Scene
    occupancy: np.ndarray
    cloud: np.ndarray
    index: SpatialIndex


@dataclass
class ViewData:
    view: scenes.RenderedView
    dgrids: list


class Dataset:
    """Lazily rendered scenes and views, cached per (seed, view)."""

    def __init__(self, config: net.NetConfig, gt_points=2048, spec: scenes.SceneSpec | None = None):
        self.config = config
        self.gt_points = gt_points
        self.spec = spec or scenes.SceneSpec()
        self.camera = camera_config(config)
        self._scenes = {}
        self._views = {}

    def scene(self, seed) -> SceneData:
        d = self._scenes.get(seed)
        if d is None:
            sc = scenes.sample_scene(seed, self.spec)
            cloud = scenes.sample_surface(sc, self.gt_points, seed)
            d = SceneData(seed, sc, scenes.gt_occupancy(sc, self.config.out_grid), cloud,
                          SpatialIndex(cloud))
            self._scenes[seed] = d
        return d

    def view(self, seed, view) -> ViewData:
        key = (seed, view)
        v = self._views.get(key)
        if v is None:
            cam = scenes.view_camera(seed, view, self.camera)
            rv = scenes.render(self.scene(seed).scene, cam)
            v = ViewData(rv, net.config_depth_grids(rv.depth, cam, self.config))
            self._views[key] = v
        return v


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: net.NetConfig
    params: dict
    state: AdamState
    iteration: int


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "meta/net_config": formats.text_tensor(formats.format_config(ck.config)),
        "meta/iteration": np.array([ck.iteration], dtype=np.float32),
    }
    tensors = dict(meta)
    tensors.update({k: v.data if hasattr(v, "data") else v for k, v in ck.params.items()})
    opt = {"adam/t": np.array([ck.state.t], dtype=np.float32)}
    for k in ck.params:
        if k in ck.state.m:
            opt[f"adam/m/{k}"] = ck.state.m[k]
            opt[f"adam/v/{k}"] = ck.state.v[k]
    return formats.dump_archive(tensors, opt)


def save_checkpoint(path, ck: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def parse_checkpoint(data: bytes) -> Checkpoint:
    from .tensor import Tensor
    tensors, opt = formats.load_archive(data, 2)
    try:
        text = formats.tensor_text(tensors.pop("meta/net_config"))
        iteration = int(tensors.pop("meta/iteration")[0])
    except KeyError as e:
        raise formats.FormatError(f"checkpoint lacks {e.args[0]}") from None
    config = net.NetConfig(**formats.parse_config_text(text, formats.dataclass_defaults(net.NetConfig())))
    expect = net.param_shapes(config)
    if set(expect) != set(tensors):
        raise formats.FormatError("checkpoint tensors do not match its network config")
    params = {}
    for k in expect:
        if tensors[k].shape != expect[k]:
            raise formats.FormatError(f"{k}: shape {tensors[k].shape} != {expect[k]}")
        params[k] = Tensor(tensors[k], requires_grad=True)
    state = AdamState(t=int(opt.pop("adam/t", np.zeros(1))[0]))
    for k in expect:
        m, v = opt.get(f"adam/m/{k}"), opt.get(f"adam/v/{k}")
        if m is not None and v is not None:
            state.m[k] = m.copy()
            state.v[k] = v.copy()
    return Checkpoint(config, params, state, iteration)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# --- loop -------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    phase: str
    lr: float
    bce: float
    chamfer: float
    total: float
    points: int


def pair_order(tc: TrainConfig, epoch: int):
    """Deterministic shuffled (scene, view) order for one pass over the training set."""
    pairs = [(s, v) for s in tc.scene_seeds for v in range(tc.n_views)]
    perm = np.random.default_rng([tc.seed, epoch]).permutation(len(pairs))
    return [pairs[i] for i in perm]


def _samples(tc: TrainConfig):
    epoch = 0
    while True:
        yield from pair_order(tc, epoch)
        epoch += 1


def _step(params, state, grads, scale):
    for g in grads.values():
        g *= scale
    adam_step({k: p.data for k, p in params.items()}, grads, state)
    for p in params.values():
        p.grad = None


def _accumulate(grads, params):
    for k, p in params.items():
        if p.grad is not None:
            if k in grads:
                grads[k] += p.grad
            else:
                grads[k] = p.grad.copy()


def _loss_row(rec, sd, config, joint):
    total, bce, cd = training_loss(rec.occ_tensor, sd.occupancy, rec.points_tensor, sd.cloud,
                                   config.w_bce, config.w_cd, sd.index)
    objective = total if joint else bce * config.w_bce
    bce_v = float(bce.data)
    cd_v = float(cd.data) if cd is not None else float("nan")
    return objective, bce_v, cd_v, float(total.data)


def train(tc: TrainConfig, config: net.NetConfig | None = None, data: Dataset | None = None,
          callback=None):
    """Run the schedule; returns ``(checkpoint, log rows)``.

    Logged ``total`` is always the weighted sum of both terms; during the
    BCE-only phase the Chamfer term is measured but not back-propagated.
    """
    config = config or net.PRESETS[tc.preset]
    data = data or Dataset(config, tc.gt_points)
    params = net.init_params(config, tc.seed)
    state = AdamState(lr=tc.lr)
    rows = []
    samples = _samples(tc)
    for it in range(tc.iterations):
        state.lr = tc.lr_at(it)
        joint = it >= tc.pretrain_iters
        grads = {}
        acc = np.zeros(3)
        npts = 0
        try:
            for _ in range(tc.batch_size):
                seed, v = next(samples)
                sd, vd = data.scene(seed), data.view(seed, v)
                rv = vd.view
                rec = net.forward(rv.image, rv.depth, rv.camera, params, config,
                                  use_depth=tc.use_depth, dgrids=vd.dgrids)
                objective, bce_v, cd_v, tot_v = _loss_row(rec, sd, config, joint)
                objective.backward()
                _accumulate(grads, params)
                for p in params.values():
                    p.grad = None
                acc += (bce_v, cd_v, tot_v)
                npts += len(rec.points)
        except FloatingPointError as e:
            raise TrainingDiverged(it, e) from e
        acc /= tc.batch_size
        if not np.isfinite(acc[0]) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(it, "loss or gradient")
        _step(params, state, grads, 1.0 / tc.batch_size)
        row = LogRow(it, "joint" if joint else "bce", state.lr, acc[0], acc[1], acc[2], npts)
        rows.append(row)
        if callback is not None:
            callback(row, params)
    rng = np.random.default_rng([tc.seed, 1 << 20])
    for k in range(tc.fuse_iters):
        it = tc.iterations + k
        state.lr = tc.lr_final
        seed = tc.scene_seeds[int(rng.integers(tc.n_scenes))]
        va, vb = rng.choice(tc.n_views, size=2, replace=False)
        sd = data.scene(seed)
        views = [(x.view.image, x.view.depth, x.view.camera) for x in (data.view(seed, int(va)),
                                                                        data.view(seed, int(vb)))]
        try:
            rec = net.forward_views(views, params, config, use_depth=tc.use_depth)
            objective, bce_v, cd_v, tot_v = _loss_row(rec, sd, config, True)
            objective.backward()
        except FloatingPointError as e:
            raise TrainingDiverged(it, e) from e
        grads = {}
        _accumulate(grads, params)
        _step(params, state, grads, 1.0)
        rows.append(LogRow(it, "fuse", state.lr, bce_v, cd_v, tot_v, len(rec.points)))
    ck = Checkpoint(config, params, state, tc.iterations + tc.fuse_iters)
    return ck, rows


def write_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,phase,lr,bce,chamfer,total,points\n")
        for r in rows:
            vals = ",".join(repr(float(x)) for x in (r.lr, r.bce, r.chamfer, r.total))
            fh.write(f"{r.iteration},{r.phase},{vals},{r.points}\n")


def load_train_config(text: str) -> tuple[TrainConfig, net.NetConfig]:
    """A config file may set any TrainConfig or NetConfig field; NetConfig fields override the preset."""
    tdef = formats.dataclass_defaults(TrainConfig())
    ndef = formats.dataclass_defaults(net.DESK)
    overlap = set(tdef) & set(ndef)
    assert not overlap, overlap
    kv = formats.parse_config_text(text, {**tdef, **ndef})
    tc = TrainConfig(**{k: v for k, v in kv.items() if k in tdef})
    nc = replace(net.PRESETS[tc.preset], **{k: v for k, v in kv.items() if k in ndef})
    return tc, nc

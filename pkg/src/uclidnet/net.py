"""Image encoder, grid lifting, 3D decoder and the occupancy / folding heads."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .geometry import CameraModel, backproject_features, depth_grids
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    # N_1 .. N_S, finest first
    grid_sizes: tuple = (16, 16, 8, 4)
    out_grid: int = 16
    stem_layers: int = 0
    stem_channels: int = 16
    stage_channels: tuple = (16, 16, 16, 32)
    stage_strides: tuple = (2, 2, 2, 2)
    blocks_per_stage: int = 1
    # residual basic blocks (two convs each) or single conv + norm + ReLU blocks
    residual_stages: bool = False
    feature_channels: tuple = (16, 16, 16, 32)
    # channels of H_0 .. H_{S-1}
    decoder_channels: tuple = (24, 24, 24, 32)
    decoder_blocks: int = 1
    occ_channels: int = 8
    fold_hidden: int = 32
    n_lambda: int = 10
    tau: float = 0.5
    w_bce: float = 1.0
    w_cd: float = 1.0
    # sigmoid offsets are squeezed into (margin, 1 - margin) of the cell
    fold_margin: float = 1e-3

    def __post_init__(self):
        s = len(self.grid_sizes)
        for name in ("stage_channels", "stage_strides", "feature_channels", "decoder_channels"):
            if len(getattr(self, name)) != s:
                raise ValueError(f"{name} must have {s} entries (one per scale)")
        if not 0 < self.occ_channels < self.decoder_channels[0]:
            raise ValueError("occ_channels must leave at least one fold channel in H_0")
        sizes = (self.out_grid,) + tuple(self.grid_sizes)
        for lo, hi in zip(sizes[1:], sizes[:-1]):
            if hi not in (lo, 2 * lo):
                raise ValueError(f"grid sizes must stay equal or double going up, got {lo} -> {hi}")
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be positive")

    @property
    def scales(self):
        return len(self.grid_sizes)

    @property
    def fold_channels(self):
        return self.decoder_channels[0] - self.occ_channels


DESK = NetConfig()

PAPER = NetConfig(
    image_size=224,
    grid_sizes=(28, 28, 14, 7),
    out_grid=28,
    stem_layers=2,
    stem_channels=64,
    stage_channels=(64, 128, 256, 512),
    stage_strides=(1, 2, 2, 2),
    blocks_per_stage=2,
    residual_stages=True,
    feature_channels=(30, 30, 30, 290),
    decoder_channels=(40, 73, 73, 146),
    decoder_blocks=2,
    occ_channels=8,
    fold_hidden=128,
    n_lambda=10,
)

PRESETS = {"desk": DESK, "paper": PAPER}


def config_fields():
    return {f.name: f for f in fields(NetConfig)}


# --- parameters ------------------------------------------------------------

def _conv_w(rng, c_out, c_in, k, d, dtype, gain=2.0):
    fan_in = c_in * k ** d
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=(c_out, c_in) + (k,) * d).astype(dtype)


def init_params(config: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-initialized parameter tensors; the name order is fixed for serialization."""
    rng = np.random.default_rng(seed)
    p = {}

    def add(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def norm(prefix, c):
        add(prefix + ".gamma", np.ones(c))
        add(prefix + ".beta", np.zeros(c))

    c = 3
    for i in range(config.stem_layers):
        add(f"enc.stem{i}.w", _conv_w(rng, config.stem_channels, c, 3, 2, dtype))
        norm(f"enc.stem{i}.in", config.stem_channels)
        c = config.stem_channels
    for s, cs in enumerate(config.stage_channels, start=1):
        add(f"enc.s{s}.entry.w", _conv_w(rng, cs, c, 3, 2, dtype))
        norm(f"enc.s{s}.entry.in", cs)
        for b in range(config.blocks_per_stage):
            for j in ((1, 2) if config.residual_stages else (1,)):
                add(f"enc.s{s}.b{b}.conv{j}.w", _conv_w(rng, cs, cs, 3, 2, dtype))
                norm(f"enc.s{s}.b{b}.in{j}", cs)
        c = cs
        fc = config.feature_channels[s - 1]
        add(f"enc.f{s}.w", _conv_w(rng, fc, cs, 1, 2, dtype, gain=1.0))
        add(f"enc.f{s}.b", np.zeros(fc))

    S = config.scales
    for s in range(S, 0, -1):
        c_in = config.feature_channels[s - 1] + 2 + (config.decoder_channels[s] if s < S else 0)
        c_out = config.decoder_channels[s - 1]
        if s == 1:
            add("dec.l1.w", _conv_w(rng, c_out, c_in, 3, 3, dtype, gain=1.0))
            add("dec.l1.b", np.zeros(c_out))
            continue
        if _upsamples(config, s):
            # transposed conv weight is [C_in, C_out, k, k, k]
            # each output sees about 27/8 taps per input channel at stride 2
            std = np.sqrt(2.0 / (c_in * 27.0 / 8.0))
            add(f"dec.l{s}.entry.w", rng.normal(0.0, std, size=(c_in, c_out, 3, 3, 3)))
        else:
            add(f"dec.l{s}.entry.w", _conv_w(rng, c_out, c_in, 3, 3, dtype))
        norm(f"dec.l{s}.entry.in", c_out)
        for b in range(config.decoder_blocks):
            for j in (1, 2):
                add(f"dec.l{s}.b{b}.conv{j}.w", _conv_w(rng, c_out, c_out, 3, 3, dtype))
                norm(f"dec.l{s}.b{b}.in{j}", c_out)

    h = config.fold_hidden
    fc = config.fold_channels
    add("occ.w", rng.normal(0.0, np.sqrt(1.0 / config.occ_channels), size=(1, config.occ_channels)))
    add("occ.b", np.zeros(1))
    dims1 = [2 + fc, h, h, 3]
    dims2 = [3 + fc, h, h, h, 3]
    for name, dims in (("fold1", dims1), ("fold2", dims2)):
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            gain = 2.0 if i < len(dims) - 2 else 1.0
            add(f"{name}.l{i}.w", rng.normal(0.0, np.sqrt(gain / a), size=(b, a)))
            add(f"{name}.l{i}.b", np.zeros(b))
    return p


def _upsamples(config, s):
    sizes = (config.out_grid,) + tuple(config.grid_sizes)
    return sizes[s - 1] == 2 * sizes[s]


def param_shapes(config: NetConfig) -> dict:
    return {k: v.shape for k, v in init_params(config).items()}


# --- encoder ----------------------------------------------------------------

def _in_relu(x, p, prefix):
    return T.relu(T.instance_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"]))


def encode(image, params, config: NetConfig) -> list:
    """Feature maps ``F_1 .. F_S`` of strictly decreasing extent."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    want = (3, config.image_size, config.image_size)
    if x.shape != want:
        raise ValueError(f"image shape {x.shape} does not match config {want}")
    p = params
    for i in range(config.stem_layers):
        x = _in_relu(T.conv2d(x, p[f"enc.stem{i}.w"], stride=2, padding=1), p, f"enc.stem{i}.in")
    feats = []
    for s in range(1, config.scales + 1):
        stride = config.stage_strides[s - 1]
        x = _in_relu(T.conv2d(x, p[f"enc.s{s}.entry.w"], stride=stride, padding=1), p, f"enc.s{s}.entry.in")
        for b in range(config.blocks_per_stage):
            pre = f"enc.s{s}.b{b}"
            if not config.residual_stages:
                x = _in_relu(T.conv2d(x, p[pre + ".conv1.w"], padding=1), p, pre + ".in1")
                continue
            y = _in_relu(T.conv2d(x, p[pre + ".conv1.w"], padding=1), p, pre + ".in1")
            y = T.instance_norm(T.conv2d(y, p[pre + ".conv2.w"], padding=1),
                                p[pre + ".in2.gamma"], p[pre + ".in2.beta"])
            x = T.relu(y + x)
        feats.append(T.conv2d(x, p[f"enc.f{s}.w"], p[f"enc.f{s}.b"]))
    return feats


# --- lifting --------------------------------------------------------------

def config_depth_grids(depth, camera: CameraModel, config: NetConfig) -> list:
    return depth_grids(depth, camera, config.grid_sizes)


def lift(features, depth, camera: CameraModel, config: NetConfig, dgrids=None) -> list:
    """Pairs ``(G^F_s, G^D_s)``: lifted feature grids (tensors) and binary depth grids."""
    camera.check()
    if dgrids is None:
        dgrids = depth_grids(depth, camera, config.grid_sizes)
    return [(backproject_features(f, camera, n), g)
            for f, n, g in zip(features, config.grid_sizes, dgrids)]


def fuse_views(grids_a, grids_b) -> list:
    """Point-wise sum per scale; depth grids are re-binarized."""
    if len(grids_a) != len(grids_b):
        raise ValueError("views were lifted with different numbers of scales")
    out = []
    for (fa, da), (fb, db) in zip(grids_a, grids_b):
        if fa.shape != fb.shape or np.shape(da) != np.shape(db):
            raise ValueError(f"grid shape mismatch {fa.shape} vs {fb.shape}")
        out.append((fa + fb, (np.asarray(da) + np.asarray(db) > 0).astype(np.float32)))
    return out


# --- decoder ----------------------------------------------------------------

def _depth_channels(g, dtype):
    g = np.asarray(g, dtype=dtype)[None]
    return Tensor(np.concatenate([g, g]), dtype=dtype)


def decode(grids, params, config: NetConfig, keep=None) -> Tensor:
    """Bottom-up 3D CNN over the lifted pairs; returns ``H_0`` [C_0, N_0, N_0, N_0].

    ``keep``, if a list, receives ``H_{S-1} .. H_0`` in order of computation.
    """
    p = params
    S = config.scales
    if len(grids) != S:
        raise ValueError(f"expected {S} grid pairs, got {len(grids)}")
    h = None
    for s in range(S, 0, -1):
        gf, gd = grids[s - 1]
        n = config.grid_sizes[s - 1]
        if gf.shape[1:] != (n, n, n) or gf.shape[0] != config.feature_channels[s - 1]:
            raise ValueError(f"scale {s}: feature grid {gf.shape} does not match config")
        parts = [gf, _depth_channels(gd, gf.dtype)] + ([h] if h is not None else [])
        x = T.concat(parts, axis=0)
        if s == 1:
            h = T.conv3d(x, p["dec.l1.w"], p["dec.l1.b"], padding=1)
        else:
            pre = f"dec.l{s}"
            if _upsamples(config, s):
                x = T.conv_transpose3d(x, p[pre + ".entry.w"], stride=2, padding=1, output_padding=1)
            else:
                x = T.conv3d(x, p[pre + ".entry.w"], padding=1)
            x = _in_relu(x, p, pre + ".entry.in")
            for b in range(config.decoder_blocks):
                pb = f"{pre}.b{b}"
                y = _in_relu(T.conv3d(x, p[pb + ".conv1.w"], padding=1), p, pb + ".in1")
                y = T.instance_norm(T.conv3d(y, p[pb + ".conv2.w"], padding=1),
                                    p[pb + ".in2.gamma"], p[pb + ".in2.beta"])
                x = T.relu(y + x)
            h = x
        if keep is not None:
            keep.append(h)
    return h


# --- heads ------------------------------------------------------------------

def occ_head(h0: Tensor, params, config: NetConfig) -> Tensor:
    """Per-voxel sigmoid(linear) over the first ``occ_channels`` of ``H_0``."""
    c, n = h0.shape[0], h0.shape[1]
    flat = T.transpose(T.reshape(h0, (c, -1)))
    z = T.linear(flat[:, :config.occ_channels], params["occ.w"], params["occ.b"])
    return T.reshape(T.sigmoid(z), (n, n, n))


def lambda_grid(k: int) -> np.ndarray:
    """``k`` cell-centered parameters on a rows x cols lattice over [0, 1]^2."""
    rows = max(r for r in range(1, int(np.sqrt(k)) + 1) if k % r == 0)
    cols = k // rows
    v, u = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def _mlp(x, params, name, layers):
    for i in range(layers):
        x = T.linear(x, params[f"{name}.l{i}.w"], params[f"{name}.l{i}.b"])
        if i < layers - 1:
            x = T.relu(x)
    return x


def fold_points(feat: Tensor, voxel_idx, params, config: NetConfig, n: int) -> Tensor:
    """Points for the voxels ``voxel_idx`` given their fold features [M, C_fold]."""
    k = config.n_lambda
    m = feat.shape[0]
    rep = T.repeat_rows(feat, k)
    uv = Tensor(np.tile(lambda_grid(k), (m, 1)), dtype=feat.dtype)
    first = _mlp(T.concat([uv, rep], axis=1), params, "fold1", 3)
    raw = _mlp(T.concat([first, rep], axis=1), params, "fold2", 4)
    margin = config.fold_margin
    local = T.sigmoid(raw) * (1.0 - 2.0 * margin) + margin
    ijk = np.stack(np.unravel_index(np.repeat(voxel_idx, k), (n, n, n)), axis=1)
    corner = (-1.0 + 2.0 * ijk / n).astype(feat.dtype)
    return Tensor(corner, dtype=feat.dtype) + local * (2.0 / n)


def fold_head(h0: Tensor, occ: Tensor, params, config: NetConfig, tau=None):
    """Patch points for every voxel with occupancy above ``tau``; returns (points, tags)."""
    tau = config.tau if tau is None else tau
    c, n = h0.shape[0], h0.shape[1]
    if occ.shape != (n, n, n):
        raise ValueError(f"occupancy {occ.shape} does not match H_0 extent {n}")
    idx = np.flatnonzero(occ.data.reshape(-1) > tau)
    tags = np.repeat(idx, config.n_lambda)
    if len(idx) == 0:
        return None, tags
    flat = T.transpose(T.reshape(h0, (c, -1)))
    feat = T.gather_rows(flat[:, config.occ_channels:], idx)
    return fold_points(feat, idx, params, config, n), tags


@dataclass
class Reconstruction:
    occupancy: np.ndarray
    points: np.ndarray
    tags: np.ndarray
    occ_tensor: Tensor | None = field(default=None, repr=False)
    points_tensor: Tensor | None = field(default=None, repr=False)


def heads(h0, params, config, tau=None) -> Reconstruction:
    occ = occ_head(h0, params, config)
    pts, tags = fold_head(h0, occ, params, config, tau)
    points = np.zeros((0, 3), dtype=h0.dtype) if pts is None else pts.data
    return Reconstruction(occ.data, points, tags, occ, pts)


def forward(image, depth, camera, params, config: NetConfig, use_depth=True, dgrids=None,
            tau=None) -> Reconstruction:
    """Encode, lift with the given pose and depth, decode, and run both heads.

    ``use_depth=False`` zeroes the depth grids.
    """
    feats = encode(image, params, config)
    grids = lift(feats, depth, camera, config, dgrids)
    if not use_depth:
        grids = [(g, np.zeros_like(d)) for g, d in grids]
    return heads(decode(grids, params, config), params, config, tau)


def forward_views(views, params, config: NetConfig, use_depth=True, tau=None) -> Reconstruction:
    """Multi-view forward: lift every ``(image, depth, camera)`` and fuse before decoding."""
    fused = None
    for image, depth, camera in views:
        grids = lift(encode(image, params, config), depth, camera, config)
        if not use_depth:
            grids = [(g, np.zeros_like(d)) for g, d in grids]
        fused = grids if fused is None else fuse_views(fused, grids)
    return heads(decode(fused, params, config), params, config, tau)


def with_overrides(config: NetConfig, **kw) -> NetConfig:
    return replace(config, **kw)

"""Procedural CSG scenes standing in for a shape dataset.

A scene is a union of additive primitives minus a union of subtractive ones,
rescaled so the additive bounding box fills [-1, 1]^3.  Everything is a pure
function of integer seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import CameraModel, voxelize_points

KINDS = ("sphere", "box", "cylinder", "capsule")
UNION, SUBTRACT = 1, -1

GT_OCCUPANCY_SAMPLES = 100_000


def _rng(*seed):
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple
    # sphere: (r,); box: (hx, hy, hz); cylinder/capsule: (r, half_length)
    size: tuple
    axis: int = 2
    role: int = UNION

    def params(self):
        p = np.zeros(8)
        p[:3] = self.center
        p[3:3 + len(self.size)] = self.size
        p[6] = self.axis
        return p

    def scaled(self, shift, scale):
        c = tuple(float((np.float64(ci) - si) * scale) for ci, si in zip(self.center, shift))
        s = tuple(float(np.float64(x) * scale) for x in self.size)
        return Primitive(self.kind, c, s, self.axis, self.role)

    def bbox(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            h = np.full(3, self.size[0])
        elif self.kind == "box":
            h = np.asarray(self.size, dtype=np.float64)
        else:
            r, hl = self.size
            h = np.full(3, r)
            h[self.axis] = hl + (r if self.kind == "capsule" else 0.0)
        return c - h, c + h

    def area(self):
        if self.kind == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        if self.kind == "box":
            hx, hy, hz = self.size
            return 8 * (hy * hz + hx * hz + hx * hy)
        r, hl = self.size
        side = 2 * np.pi * r * 2 * hl
        return side + (2 * np.pi * r * r if self.kind == "cylinder" else 4 * np.pi * r * r)

    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - self.size[0]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.size)
            return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        r, hl = self.size
        ax = self.axis
        other = [k for k in range(3) if k != ax]
        rho = np.linalg.norm(p[:, other], axis=1)
        if self.kind == "cylinder":
            d = np.stack([rho - r, np.abs(p[:, ax]) - hl], axis=1)
            return np.minimum(d.max(axis=1), 0) + np.linalg.norm(np.maximum(d, 0), axis=1)
        a = np.clip(p[:, ax], -hl, hl)
        q = p.copy()
        q[:, ax] -= a
        return np.linalg.norm(q, axis=1) - r

    def normal(self, p):
        """Outward unit normal at surface points p [P, 3]."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        if self.kind == "sphere":
            n = p
        elif self.kind == "box":
            q = np.abs(p) - np.asarray(self.size)
            k = np.argmax(q, axis=1)
            n = np.zeros_like(p)
            n[np.arange(len(p)), k] = np.sign(p[np.arange(len(p)), k])
        else:
            r, hl = self.size
            ax = self.axis
            if self.kind == "capsule":
                n = p.copy()
                n[:, ax] -= np.clip(p[:, ax], -hl, hl)
            else:
                other = [k for k in range(3) if k != ax]
                rho = np.linalg.norm(p[:, other], axis=1)
                cap = np.abs(np.abs(p[:, ax]) - hl) < np.abs(rho - r)
                n = p.copy()
                n[:, ax] = 0.0
                n[cap] = 0.0
                n[cap, ax] = np.sign(p[cap, ax])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def sample(self, rng, n):
        """``n`` points uniform by area on the primitive surface."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            return c + self.size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
        if self.kind == "box":
            h = np.asarray(self.size, dtype=np.float64)
            face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            k = rng.choice(3, size=n, p=face_area / face_area.sum())
            pts = rng.uniform(-1, 1, size=(n, 3)) * h
            sgn = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            pts[np.arange(n), k] = sgn * h[k]
            return c + pts
        r, hl = self.size
        ax = self.axis
        other = [k for k in range(3) if k != ax]
        side = 2 * np.pi * r * 2 * hl
        ends = 2 * np.pi * r * r if self.kind == "cylinder" else 4 * np.pi * r * r
        on_side = rng.random(n) < side / (side + ends)
        pts = np.zeros((n, 3))
        ns = int(on_side.sum())
        th = rng.uniform(0, 2 * np.pi, ns)
        pts[np.ix_(on_side, other)] = r * np.stack([np.cos(th), np.sin(th)], axis=1)
        pts[on_side, ax] = rng.uniform(-hl, hl, ns)
        ne = n - ns
        if self.kind == "cylinder":
            rho = r * np.sqrt(rng.random(ne))
            th = rng.uniform(0, 2 * np.pi, ne)
            e = np.zeros((ne, 3))
            e[:, other] = np.stack([rho * np.cos(th), rho * np.sin(th)], axis=1)
            e[:, ax] = np.where(rng.random(ne) < 0.5, -hl, hl)
        else:
            d = rng.normal(size=(ne, 3))
            d = r * d / np.linalg.norm(d, axis=1, keepdims=True)
            e = d.copy()
            e[:, ax] += np.where(d[:, ax] >= 0, hl, -hl)
        pts[~on_side] = e
        return c + pts


@dataclass
class SceneSpec:
    min_primitives: int = 2
    max_primitives: int = 4
    subtract_prob: float = 0.3
    # explicit primitive list bypasses random generation
    primitives: list | None = None


@dataclass
class Scene:
    seed: int
    primitives: list = field(default_factory=list)

    @property
    def additive(self):
        return [p for p in self.primitives if p.role == UNION]

    @property
    def subtractive(self):
        return [p for p in self.primitives if p.role == SUBTRACT]

    def implicit(self, p):
        """Signed distance bound: negative inside the composite, zero on its surface."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        f = np.min([q.sdf(p) for q in self.additive], axis=0)
        if self.subtractive:
            f = np.maximum(f, -np.min([q.sdf(p) for q in self.subtractive], axis=0))
        return f

    def kernel_arrays(self):
        ptype = np.array([KINDS.index(p.kind) for p in self.primitives], dtype=np.int32)
        role = np.array([p.role for p in self.primitives], dtype=np.int32)
        params = np.ascontiguousarray(np.stack([p.params() for p in self.primitives]))
        return ptype, role, params


def _random_primitive(rng, role, first):
    kind = KINDS[rng.integers(len(KINDS))]
    if first:
        center = rng.uniform(-0.15, 0.15, 3)
        lo, hi = 0.45, 0.8
    elif role == UNION:
        center = rng.uniform(-0.55, 0.55, 3)
        lo, hi = 0.2, 0.5
    else:
        center = rng.uniform(-0.6, 0.6, 3)
        lo, hi = 0.15, 0.35
    axis = int(rng.integers(3))
    if kind == "sphere":
        size = (rng.uniform(lo, hi),)
    elif kind == "box":
        size = tuple(rng.uniform(lo * 0.7, hi, 3))
    else:
        size = (rng.uniform(lo * 0.6, hi * 0.75), rng.uniform(lo * 0.7, hi))
    return Primitive(kind, tuple(float(c) for c in center), tuple(float(s) for s in size), axis, role)


def _fill_unit_box(prims):
    boxes = [p.bbox() for p in prims if p.role == UNION]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    shift = (lo + hi) / 2.0
    half = float(np.max((hi - lo) / 2.0))
    if half == 1.0 and not np.any(shift):
        return list(prims)
    return [p.scaled(shift, 1.0 / half) for p in prims]


def sample_scene(seed: int, spec: SceneSpec | None = None) -> Scene:
    """Deterministic CSG composite for ``seed``, rescaled to fill [-1, 1]^3."""
    spec = spec or SceneSpec()
    if spec.primitives is not None:
        prims = list(spec.primitives)
        if not any(p.role == UNION for p in prims):
            raise ValueError("scene needs at least one additive primitive")
        return Scene(seed, _fill_unit_box(prims))
    rng = _rng(seed, 11)
    count = int(rng.integers(spec.min_primitives, spec.max_primitives + 1))
    prims = [_random_primitive(rng, UNION, True)]
    for _ in range(count - 1):
        role = SUBTRACT if rng.random() < spec.subtract_prob else UNION
        prims.append(_random_primitive(rng, role, False))
    return Scene(seed, _fill_unit_box(prims))


# --- cameras -----------------------------------------------------------------

@dataclass
class CameraConfig:
    height: int = 64
    width: int = 64
    focal: float = 40.0
    radius_min: float = 3.0
    radius_max: float = 3.8
    up_jitter: float = 0.2


def sample_camera(seed: int, config: CameraConfig | None = None) -> CameraModel:
    """Look-at camera on a spherical shell around the origin with fixed intrinsics."""
    cfg = config or CameraConfig()
    rng = _rng(seed, 23)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    radius = rng.uniform(cfg.radius_min, cfg.radius_max)
    up = np.array([0.0, 1.0, 0.0]) + cfg.up_jitter * rng.normal(size=3)
    return CameraModel.look_at(radius * d, up=up, focal=cfg.focal,
                               height=cfg.height, width=cfg.width)


def view_camera(scene_seed: int, view: int, config: CameraConfig | None = None) -> CameraModel:
    return sample_camera(int(scene_seed) * 1009 + int(view), config)


# --- rendering -----------------------------------------------------------

@dataclass
class RenderedView:
    camera: CameraModel
    image: np.ndarray  # [3, H, W] float32
    depth: np.ndarray  # [H, W] float32, 0 = background


LIGHT_DIR = np.array([-0.3, -0.5, -1.0]) / np.linalg.norm([-0.3, -0.5, -1.0])


def pixel_rays(camera: CameraModel):
    """World directions through every pixel center, scaled to unit camera-frame depth."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    dc = np.stack([(u.ravel() - camera.cx) / camera.focal,
                   (v.ravel() - camera.cy) / camera.focal,
                   np.ones(u.size)], axis=1)
    return np.ascontiguousarray(dc @ camera.rotation)


def cast(scene: Scene, camera: CameraModel, backend=None):
    """Depth (camera-frame z of the first hit, 0 on miss) and hit primitive per pixel."""
    k = _kernels.get_backend(backend)
    dirs = pixel_rays(camera)
    ptype, role, params = scene.kernel_arrays()
    t0, t1 = k.ray_intervals(np.ascontiguousarray(camera.center), dirs, ptype, params)
    hit, prim = k.first_hit(np.ascontiguousarray(t0), np.ascontiguousarray(t1), role, 1e-9)
    return np.asarray(hit), np.asarray(prim), dirs


def render(scene: Scene, camera: CameraModel, backend=None) -> RenderedView:
    """Ray-cast depth map plus a 3-channel synthetic image (shading, normal code, mask)."""
    h, w = camera.height, camera.width
    t, prim, dirs = cast(scene, camera, backend)
    fg = prim >= 0
    normals = np.zeros((t.size, 3))
    pts = camera.center + t[:, None] * dirs
    for j, p in enumerate(scene.primitives):
        sel = prim == j
        if np.any(sel):
            normals[sel] = p.normal(pts[sel]) * (1.0 if p.role == UNION else -1.0)
    n_cam = normals @ camera.rotation.T
    shade = np.where(fg, 0.15 + 0.85 * np.maximum(0.0, n_cam @ LIGHT_DIR), 0.0)
    code = np.where(fg, 0.5 + 0.5 * normals[:, 1], 0.0)
    image = np.stack([shade, code, fg.astype(np.float64)]).reshape(3, h, w).astype(np.float32)
    depth = np.where(fg, t, 0.0).reshape(h, w).astype(np.float32)
    return RenderedView(camera, image, depth)


# --- ground truth --------------------------------------------------------

def _exposed(scene: Scene, j: int, p):
    prim = scene.primitives[j]
    keep = np.ones(len(p), dtype=bool)
    inside_pos = np.zeros(len(p), dtype=bool)
    for i, q in enumerate(scene.primitives):
        if i == j:
            continue
        d = q.sdf(p)
        if q.role == UNION:
            if prim.role == UNION:
                keep &= d >= 0
            else:
                inside_pos |= d <= 0
        else:
            keep &= d >= 0
    if prim.role == SUBTRACT:
        keep &= inside_pos
    return keep


def sample_surface(scene: Scene, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points area-uniform on the exposed composite surface ([n, 3])."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(scene.seed, seed, 37)
    areas = np.array([p.area() for p in scene.primitives])
    probs = areas / areas.sum()
    out = []
    got = 0
    for _ in range(200):
        batch = max(2 * (n - got), 256)
        which = rng.choice(len(scene.primitives), size=batch, p=probs)
        pts = np.empty((batch, 3))
        keep = np.zeros(batch, dtype=bool)
        for j in range(len(scene.primitives)):
            sel = which == j
            m = int(sel.sum())
            if m == 0:
                continue
            pj = scene.primitives[j].sample(rng, m)
            pts[sel] = pj
            keep[sel] = _exposed(scene, j, pj)
        out.append(pts[keep])
        got += int(keep.sum())
        if got >= n:
            break
    else:
        raise RuntimeError("scene surface is (nearly) empty; cannot sample")
    return np.concatenate(out)[:n]


def gt_occupancy(scene: Scene, n: int) -> np.ndarray:
    """Surface occupancy at resolution ``n`` from a dense 10^5-point sampling."""
    if n < 2:
        raise ValueError("grid size must be >= 2")
    return voxelize_points(sample_surface(scene, GT_OCCUPANCY_SAMPLES, seed=1), n)

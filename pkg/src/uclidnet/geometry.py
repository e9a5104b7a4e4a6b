"""Pinhole camera, feature-map lifting and depth-map voxelization.

Object space is the cube [-1, 1]^3 split into ``N^3`` voxels; voxel ``(x, y, z)``
is centered at ``-1 + (2i + 1) / N`` along each axis.  Grids are stored as
``[channels, N, N, N]`` indexed ``[c, x, y, z]``.  Pixel centers sit at integer
image coordinates, ``u`` along columns and ``v`` along rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, bilinear_sample2d, reshape


class BehindCameraError(ValueError):
    pass


@dataclass
class CameraModel:
    """World-to-camera rotation and translation plus fixed pinhole intrinsics.

    Camera frame: x right, y down, z forward (depth).
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    cx: float
    cy: float
    height: int
    width: int
    center: np.ndarray | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.center is None:
            self.center = -self.rotation.T @ self.translation
        else:
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *,
                focal, height, width, cx=None, cy=None):
        position = np.asarray(position, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - position
        z = z / np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-6:
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 0.0, 1.0])
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(rot, -rot @ position, float(focal),
                   width / 2.0 if cx is None else float(cx),
                   height / 2.0 if cy is None else float(cy),
                   int(height), int(width), center=position.copy())

    def to_camera(self, points):
        """Camera-frame coordinates of world points [..., 3]."""
        p = np.asarray(points, dtype=np.float64)
        # R (p - C) keeps collinear-with-center points exactly proportional
        return (p - self.center) @ self.rotation.T

    def check(self, tol=1e-9):
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol) or np.linalg.det(r) <= 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")


def project(camera: CameraModel, point):
    """Pixel coordinates ``(u, v)`` of world point(s); raises for non-positive depth."""
    pc = camera.to_camera(point)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive camera-frame depth")
    u = camera.cx + camera.focal * pc[..., 0] / z
    v = camera.cy + camera.focal * pc[..., 1] / z
    return np.stack([u, v], axis=-1)


def voxel_centers(n: int) -> np.ndarray:
    """[n^3, 3] centers in ``[x, y, z]`` C order."""
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def lift_coords(camera: CameraModel, n: int, fh: int, fw: int) -> np.ndarray:
    """Feature-map pixel coordinates of every voxel center of an ``n^3`` grid."""
    uv = project(camera, voxel_centers(n))
    return uv * np.array([fw / camera.width, fh / camera.height])


def backproject_features(fmap: Tensor, camera: CameraModel, n: int) -> Tensor:
    """Lift ``fmap`` [f, H_s, W_s] to a feature grid [f, n, n, n].

    Each voxel takes the bilinear sample at its center's projection, rescaled
    from full-image to feature-map pixels.  Voxels projecting outside the map
    hold zeros.
    """
    f, fh, fw = fmap.shape
    g = bilinear_sample2d(fmap, lift_coords(camera, n, fh, fw))
    return reshape(g, (f, n, n, n))


def backproject_depth(depth, camera: CameraModel) -> np.ndarray:
    """One object-space point per pixel with positive depth ([P, 3])."""
    d = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("depth map must be non-negative")
    v, u = np.nonzero(d > 0)
    z = d[v, u]
    xc = (u - camera.cx) * z / camera.focal
    yc = (v - camera.cy) * z / camera.focal
    pc = np.stack([xc, yc, z], axis=1)
    return pc @ camera.rotation + camera.center


def voxel_index(points, n: int):
    """Cell index per point and a mask of points inside [-1, 1]^3.

    A point on a shared cell face belongs to the lower-index cell.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.all((p >= -1.0) & (p <= 1.0), axis=1)
    idx = np.ceil((p + 1.0) * (n / 2.0)).astype(np.int64) - 1
    idx = np.clip(idx, 0, n - 1)
    return idx, inside


def voxelize_points(cloud, n: int) -> np.ndarray:
    """Binary [n, n, n] grid; a voxel is 1 iff at least one point falls in its cell."""
    grid = np.zeros((n, n, n), dtype=np.float32)
    idx, inside = voxel_index(cloud, n)
    idx = idx[inside]
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid


def depth_grids(depth, camera: CameraModel, sizes) -> list[np.ndarray]:
    cloud = backproject_depth(depth, camera)
    return [voxelize_points(cloud, n) for n in sizes]

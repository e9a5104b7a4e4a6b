"""Balanced k-d tree for exact nearest-neighbor queries in 3D."""
from __future__ import annotations

import numpy as np

from . import _kernels


class SpatialIndex:
    """Exact nearest neighbor over a fixed point cloud.

    Distances are computed as ``sqrt(dx*dx + dy*dy + dz*dz)`` in float64, so
    results coincide with a brute-force scan using the same arithmetic.  Ties
    resolve to the lowest original index.
    """

    def __init__(self, points, backend=None):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(pts) == 0:
            raise ValueError("cannot index an empty point cloud")
        self.points = pts
        self._k = _kernels.get_backend(backend)
        self._tree = self._k.kd_build(pts)

    def __len__(self):
        return len(self.points)

    def query_sq(self, queries):
        """Nearest index and squared distance for each query point."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        node_point, node_axis, left, right, root = self._tree
        idx, d2 = self._k.kd_query(self.points, node_point, node_axis, left, right, root, q)
        return np.asarray(idx), np.asarray(d2)

    def query(self, queries):
        """``(distances, indices)`` of the nearest indexed point for every query."""
        idx, d2 = self.query_sq(queries)
        return np.sqrt(d2), idx


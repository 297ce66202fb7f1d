"""Shape-to-shape distance metrics."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InputError
from .mesh import TriangleMesh, sample_surface


def _as_point_cloud(obj, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(obj, TriangleMesh):
        return sample_surface(obj, n_samples, rng)
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InputError("chamfer input: expected a TriangleMesh or a non-empty (n, 3) array")
    return pts


def chamfer_distance(a, b, n_samples: int = 30000, seed: int = 0) -> float:
    """Symmetric mean squared nearest-neighbour distance.

    0.5 * (mean_i min_j |a_i - b_j|^2 + mean_j min_i |b_j - a_i|^2).
    Mesh inputs are sampled on the surface (area-weighted, seeded); point
    array inputs are used as given. Values are squared distances, so units
    are length^2.
    """
    rng = np.random.default_rng(seed)
    pa = _as_point_cloud(a, n_samples, rng)
    pb = _as_point_cloud(b, n_samples, rng)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))

"""SDF training-sample generation for analytic shapes and meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from .mesh import TriangleMesh, sample_surface
from .meshdist import MeshDistanceField
from .shapes import AnalyticShape, surface_points


@dataclass
class SampleSet:
    """Point/SDF pairs for one shape, float32 on purpose (matches training)."""

    shape_id: str
    points: np.ndarray  # (m, 3) float32
    sdf: np.ndarray     # (m,) float32

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.sdf = np.asarray(self.sdf, dtype=np.float32).reshape(-1)
        if len(self.points) != len(self.sdf):
            raise InputError("SampleSet: points and sdf lengths differ")

    def __len__(self) -> int:
        return len(self.sdf)


def sample_shape(
    shape,
    n_samples: int,
    *,
    shape_id: str = "",
    surface_fraction: float = 0.95,
    noise_scales: tuple[float, float] = (0.005, 0.05),
    seed: int = 0,
) -> SampleSet:
    """Surface-biased SDF samples.

    95% (by default) of the points start on the surface and are perturbed by
    isotropic Gaussian noise; the perturbed half uses the tight scale and the
    other half the loose scale. The remaining 5% are uniform in [-1, 1]^3 so
    the field is supervised away from the shape too. Values are evaluated
    exactly (analytic field, or signed mesh distance for TriangleMesh input).
    """
    if n_samples <= 0:
        raise InputError("n_samples: must be positive")
    if not (0.0 <= surface_fraction <= 1.0):
        raise InputError("surface_fraction: must be in [0, 1]")

    rng = np.random.default_rng(seed)
    if isinstance(shape, AnalyticShape):
        fieldfn = shape.sdf
        surf = lambda n: surface_points(shape, n, rng)  # noqa: E731
    elif isinstance(shape, TriangleMesh):
        if shape.is_empty:
            raise InputError("shape: cannot sample an empty mesh")
        fieldfn = MeshDistanceField(shape)
        surf = lambda n: sample_surface(shape, n, rng)  # noqa: E731
        if not shape_id:
            shape_id = shape.shape_id
    else:
        raise InputError(f"shape: expected AnalyticShape or TriangleMesh, got {type(shape)!r}")

    n_surface = int(round(n_samples * surface_fraction))
    n_uniform = n_samples - n_surface
    n_tight = n_surface // 2
    n_loose = n_surface - n_tight

    chunks = []
    if n_surface > 0:
        base = surf(n_surface)
        noise = np.concatenate(
            [
                rng.normal(0.0, noise_scales[0], size=(n_tight, 3)),
                rng.normal(0.0, noise_scales[1], size=(n_loose, 3)),
            ],
            axis=0,
        )
        chunks.append(base + noise)
    if n_uniform > 0:
        chunks.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
    points = np.concatenate(chunks, axis=0)
    values = fieldfn(points)
    return SampleSet(shape_id=shape_id, points=points.astype(np.float32), sdf=np.asarray(values, dtype=np.float32))

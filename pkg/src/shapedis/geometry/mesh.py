"""Triangle meshes: marching-cubes extraction, smoothing, volume, sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from skimage import measure

from ..errors import InputError


class OpenMeshWarning(UserWarning):
    """Volume requested for a mesh that is not closed; result is approximate."""


class EmptyLevelSetWarning(UserWarning):
    """The iso level does not cross the sampled field; extraction is empty."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64, CCW when viewed from outside
    shape_id: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InputError("faces: vertex index out of range")

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), self.shape_id)


def empty_mesh(shape_id: str = "") -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), shape_id)


def is_closed(mesh: TriangleMesh) -> bool:
    """True when every directed edge is matched by its reverse exactly once.

    This checks both watertightness and consistent orientation.
    """
    if mesh.is_empty:
        return False
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    fwd = set(map(tuple, edges))
    if len(fwd) != len(edges):
        return False  # duplicated directed edge
    return all((b, a) in fwd for a, b in fwd)


def signed_volume(mesh: TriangleMesh) -> float:
    """Signed volume from the divergence theorem (tetrahedra to the origin)."""
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume. Warns if the mesh is open; errors if it has no faces."""
    if mesh.is_empty:
        raise InputError("mesh: cannot compute the volume of an empty mesh")
    if not is_closed(mesh):
        warnings.warn(
            "mesh is not closed; volume is the absolute signed-tetrahedron sum",
            OpenMeshWarning,
            stacklevel=2,
        )
    return abs(signed_volume(mesh))


def _vertex_adjacency(mesh: TriangleMesh):
    from scipy.sparse import coo_matrix

    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 1], f[:, 2], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 1], f[:, 0], f[:, 2], f[:, 1], f[:, 0], f[:, 2]])
    n = len(mesh.vertices)
    data = np.ones(len(rows))
    adj = coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0  # csr conversion summed duplicates; make it unweighted
    return adj


def laplacian_smooth(mesh: TriangleMesh, iterations: int = 5, lam: float = 0.5) -> TriangleMesh:
    """Uniform-weight Laplacian smoothing: v <- v + lam * (mean(neighbors) - v)."""
    if mesh.is_empty or iterations <= 0:
        return mesh.copy()
    adj = _vertex_adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    v = mesh.vertices.copy()
    for _ in range(iterations):
        neighbor_mean = adj.dot(v) / deg[:, None]
        v = v + lam * (neighbor_mean - v)
    return TriangleMesh(v, mesh.faces.copy(), mesh.shape_id)


def extract_mesh(
    fieldfn,
    resolution: int = 64,
    iso: float = 0.0,
    *,
    bounds: float = 1.0,
    smooth: bool = False,
    smooth_iterations: int = 5,
    smooth_lam: float = 0.5,
    chunk: int = 65536,
    shape_id: str = "",
) -> TriangleMesh:
    """Marching cubes over a field sampled on a regular grid in [-b, b]^3.

    ``fieldfn`` maps (m, 3) points to (m,) values. If the iso level never
    crosses the sampled values an empty mesh is returned with a warning.
    Faces are reoriented so the signed volume is positive (outward normals
    for a negative-inside field). Smoothing is off by default: metric paths
    consume raw extractions, visual exports opt in.
    """
    if resolution < 2:
        raise InputError("resolution: need at least 2 grid nodes per axis")
    xs = np.linspace(-bounds, bounds, resolution)
    grid = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(grid))
    for start in range(0, len(grid), chunk):
        vals[start : start + chunk] = fieldfn(grid[start : start + chunk])
    vol = vals.reshape(resolution, resolution, resolution)

    if vol.min() > iso or vol.max() < iso:
        warnings.warn(
            f"iso level {iso} outside sampled field range [{vol.min():.4g}, {vol.max():.4g}]",
            EmptyLevelSetWarning,
            stacklevel=2,
        )
        return empty_mesh(shape_id)

    spacing = 2.0 * bounds / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(spacing,) * 3)
    verts = verts - bounds
    mesh = TriangleMesh(verts, faces.astype(np.int64), shape_id)
    if signed_volume(mesh) < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    if smooth:
        mesh = laplacian_smooth(mesh, iterations=smooth_iterations, lam=smooth_lam)
    return mesh


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise InputError("mesh: cannot sample the surface of an empty mesh")
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise InputError("mesh: total surface area is zero")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    return a[idx] + u[:, None] * (b[idx] - a[idx]) + w[:, None] * (c[idx] - a[idx])


def normalize_mesh(mesh: TriangleMesh, target_radius: float = 0.9):
    """Center on the bounding-box midpoint and scale to a target radius.

    Returns (mesh, transform) where transform holds {center, scale} with
    world = normalized * scale + center.
    """
    if mesh.is_empty:
        raise InputError("mesh: cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = np.linalg.norm(mesh.vertices - center, axis=1).max()
    if radius <= 0:
        raise InputError("mesh: degenerate (all vertices coincide)")
    scale = radius / target_radius
    out = TriangleMesh((mesh.vertices - center) / scale, mesh.faces.copy(), mesh.shape_id)
    return out, {"center": center.tolist(), "scale": float(scale)}

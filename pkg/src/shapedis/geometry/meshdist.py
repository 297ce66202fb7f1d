"""Signed point-to-mesh distance via angle-weighted pseudonormals.

The sign test uses the pseudonormal of whichever feature (face, edge, vertex)
holds the closest point, which is the standard robust way to sign distances
against a closed, consistently oriented triangle mesh. Candidate faces per
query come from a cKDTree over face centroids, so queries stay near-linear.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InputError
from .mesh import TriangleMesh

# region codes for the closest feature of a triangle (a, b, c)
_FACE = 0
_EDGE_AB, _EDGE_BC, _EDGE_CA = 1, 2, 3
_VERT_A, _VERT_B, _VERT_C = 4, 5, 6


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 1e-300, n, 1.0)


class MeshDistanceField:
    """Callable signed distance to a closed triangle mesh.

    Positive outside, negative inside. Accuracy of the sign relies on the
    mesh being watertight with outward-oriented faces; magnitudes are exact
    closest-point distances to the candidate set.
    """

    def __init__(self, mesh: TriangleMesh, n_candidates: int = 48):
        if mesh.is_empty:
            raise InputError("mesh: cannot build a distance field from an empty mesh")
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        self._a = v[f[:, 0]]
        self._b = v[f[:, 1]]
        self._c = v[f[:, 2]]
        cross = np.cross(self._b - self._a, self._c - self._a)
        self._face_normal = _normalize_rows(cross)

        # Vertex pseudonormals: incident face normals weighted by the corner angle.
        vert_normal = np.zeros_like(v)
        for corner, (p, q) in enumerate([(1, 2), (2, 0), (0, 1)]):
            e1 = _normalize_rows(v[f[:, p]] - v[f[:, corner]])
            e2 = _normalize_rows(v[f[:, q]] - v[f[:, corner]])
            ang = np.arccos(np.clip(np.einsum("ij,ij->i", e1, e2), -1.0, 1.0))
            np.add.at(vert_normal, f[:, corner], self._face_normal * ang[:, None])
        self._vert_normal = _normalize_rows(vert_normal)

        # Edge pseudonormals: sum of the (normally two) adjacent face normals.
        edge_key = {}
        edge_normals = []
        self._face_edge = np.empty((len(f), 3), dtype=np.int64)
        local_edges = [(0, 1), (1, 2), (2, 0)]
        for fi in range(len(f)):
            for li, (p, q) in enumerate(local_edges):
                key = (min(f[fi, p], f[fi, q]), max(f[fi, p], f[fi, q]))
                ei = edge_key.get(key)
                if ei is None:
                    ei = len(edge_normals)
                    edge_key[key] = ei
                    edge_normals.append(np.zeros(3))
                edge_normals[ei] = edge_normals[ei] + self._face_normal[fi]
                self._face_edge[fi, li] = ei
        self._edge_normal = _normalize_rows(np.asarray(edge_normals))

        self._k = int(min(n_candidates, len(f)))
        centroids = (self._a + self._b + self._c) / 3.0
        self._tree = cKDTree(centroids)

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        if single:
            p = p[None, :]
        if p.ndim != 2 or p.shape[1] != 3:
            raise InputError(f"points: expected (m, 3) array, got shape {p.shape}")

        _, cand = self._tree.query(p, k=self._k)
        cand = np.atleast_2d(cand)
        if cand.ndim == 1:  # k == 1 collapses the axis
            cand = cand[:, None]

        n, k = cand.shape
        pe = p[:, None, :]  # (n, 1, 3)
        a, b, c = self._a[cand], self._b[cand], self._c[cand]  # (n, k, 3)
        cp, region = _closest_point_triangle(pe, a, b, c)
        d2 = np.sum((pe - cp) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(n)
        face = cand[rows, best]
        cp_best = cp[rows, best]
        region_best = region[rows, best]
        dist = np.sqrt(d2[rows, best])

        normal = np.empty((n, 3))
        fmask = region_best == _FACE
        normal[fmask] = self._face_normal[face[fmask]]
        for code, local in ((_EDGE_AB, 0), (_EDGE_BC, 1), (_EDGE_CA, 2)):
            m = region_best == code
            if m.any():
                normal[m] = self._edge_normal[self._face_edge[face[m], local]]
        for code, corner in ((_VERT_A, 0), (_VERT_B, 1), (_VERT_C, 2)):
            m = region_best == code
            if m.any():
                normal[m] = self._vert_normal[self.mesh.faces[face[m], corner]]

        side = np.einsum("ij,ij->i", p - cp_best, normal)
        signed = np.where(side < 0, -dist, dist)
        return signed[0] if single else signed


def _closest_point_triangle(p, a, b, c):
    """Closest points on triangles for broadcastable (..., 3) inputs.

    Returns (closest_point, region_code). Decomposes into the in-plane
    projection (valid only when its barycentrics are non-negative) and the
    three clamped edge candidates, which also cover the vertex regions.
    """
    ab = b - a
    ac = c - a
    normal = np.cross(ab, ac)
    nn = np.sum(normal * normal, axis=-1)
    ap = p - a

    # Barycentric coordinates of the plane projection (scaled by nn).
    # v weights b, w weights c.
    v = np.sum(np.cross(ap, ac) * normal, axis=-1)
    w = np.sum(np.cross(ab, ap) * normal, axis=-1)
    u = nn - v - w
    inside = (v >= 0) & (w >= 0) & (u >= 0) & (nn > 1e-300)
    safe_nn = np.where(nn > 1e-300, nn, 1.0)
    proj = a + (v / safe_nn)[..., None] * ab + (w / safe_nn)[..., None] * ac

    def edge_candidate(p0, p1, code_lo, code_mid, code_hi):
        seg = p1 - p0
        denom = np.sum(seg * seg, axis=-1)
        t = np.sum((p - p0) * seg, axis=-1) / np.where(denom > 1e-300, denom, 1.0)
        t = np.clip(t, 0.0, 1.0)
        cp = p0 + t[..., None] * seg
        code = np.full(t.shape, code_mid, dtype=np.int8)
        code = np.where(t <= 1e-12, code_lo, code)
        code = np.where(t >= 1.0 - 1e-12, code_hi, code)
        return cp, code

    cands = [
        edge_candidate(a, b, _VERT_A, _EDGE_AB, _VERT_B),
        edge_candidate(b, c, _VERT_B, _EDGE_BC, _VERT_C),
        edge_candidate(c, a, _VERT_C, _EDGE_CA, _VERT_A),
    ]
    cps = np.stack([cp for cp, _ in cands], axis=0)
    codes = np.stack([code for _, code in cands], axis=0)
    d2 = np.sum((p[None, ...] - cps) ** 2, axis=-1)
    pick = np.argmin(d2, axis=0)
    cp_edge = np.take_along_axis(cps, pick[None, ..., None], axis=0)[0]
    code_edge = np.take_along_axis(codes, pick[None, ...], axis=0)[0]

    cp = np.where(inside[..., None], proj, cp_edge)
    region = np.where(inside, np.int8(_FACE), code_edge)
    return cp, region

"""Mesh extraction, volume, smoothing, surface sampling."""

import warnings

import numpy as np
import pytest

from shapedis.errors import InputError
from shapedis.geometry import (
    EmptyLevelSetWarning,
    OpenMeshWarning,
    TriangleMesh,
    empty_mesh,
    extract_mesh,
    is_closed,
    laplacian_smooth,
    mesh_volume,
    normalize_mesh,
    sample_surface,
    signed_volume,
)
from oracles import sphere_volume


def unit_cube_mesh():
    """Hand-built closed cube [0,1]^3 with outward orientation. Volume 1."""
    v = np.array(
        [
            [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (z=0), outward -z
            [4, 5, 6], [4, 6, 7],  # top (z=1), outward +z
            [0, 1, 5], [0, 5, 4],  # y=0
            [1, 2, 6], [1, 6, 5],  # x=1
            [2, 3, 7], [2, 7, 6],  # y=1
            [3, 0, 4], [3, 4, 7],  # x=0
        ],
        dtype=np.int64,
    )
    return TriangleMesh(v, f)


class TestVolume:
    def test_cube_volume_exact(self):
        mesh = unit_cube_mesh()
        assert is_closed(mesh)
        assert signed_volume(mesh) == pytest.approx(1.0, abs=1e-12)
        assert mesh_volume(mesh) == pytest.approx(1.0, abs=1e-12)

    def test_flipped_cube_negative_signed_volume(self):
        mesh = unit_cube_mesh()
        flipped = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
        assert signed_volume(flipped) == pytest.approx(-1.0, abs=1e-12)
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # closed mesh: no warning expected
            assert mesh_volume(flipped) == pytest.approx(1.0, abs=1e-12)

    def test_open_mesh_warns(self):
        tri = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        with pytest.warns(OpenMeshWarning):
            mesh_volume(tri)

    def test_empty_mesh_raises(self):
        with pytest.raises(InputError):
            mesh_volume(empty_mesh())


class TestExtraction:
    def test_unit_sphere(self):
        field = lambda p: np.linalg.norm(p, axis=1) - 1.0  # noqa: E731
        mesh = extract_mesh(field, resolution=64)
        assert is_closed(mesh)
        vol = mesh_volume(mesh)
        assert abs(vol - sphere_volume(1.0)) / sphere_volume(1.0) < 0.05
        residuals = np.abs(field(mesh.vertices))
        assert residuals.max() <= 1.5 * (2.0 / 64.0)
        assert signed_volume(mesh) > 0

    def test_offset_iso_level(self):
        field = lambda p: np.linalg.norm(p, axis=1) - 0.5  # noqa: E731
        mesh = extract_mesh(field, resolution=48, iso=0.1)
        # iso 0.1 of this field is the sphere of radius 0.6
        vol = mesh_volume(mesh)
        assert abs(vol - sphere_volume(0.6)) / sphere_volume(0.6) < 0.05

    def test_empty_level_set(self):
        field = lambda p: np.full(len(p), 2.0)  # noqa: E731
        with pytest.warns(EmptyLevelSetWarning):
            mesh = extract_mesh(field, resolution=16)
        assert mesh.is_empty

    def test_resolution_validation(self):
        field = lambda p: np.linalg.norm(p, axis=1) - 0.5  # noqa: E731
        with pytest.raises(InputError):
            extract_mesh(field, resolution=1)


class TestSmoothing:
    def test_preserves_topology_and_shrinks_mildly(self, sphere_mesh):
        smoothed = laplacian_smooth(sphere_mesh, iterations=5, lam=0.5)
        assert len(smoothed.vertices) == len(sphere_mesh.vertices)
        assert np.array_equal(smoothed.faces, sphere_mesh.faces)
        assert is_closed(smoothed)
        v0 = mesh_volume(sphere_mesh)
        v1 = mesh_volume(smoothed)
        assert 0.9 * v0 < v1 <= v0 * 1.001  # uniform smoothing shrinks slightly

    def test_zero_iterations_is_identity(self, sphere_mesh):
        same = laplacian_smooth(sphere_mesh, iterations=0)
        assert np.array_equal(same.vertices, sphere_mesh.vertices)

    def test_smooth_flag_in_extraction(self):
        field = lambda p: np.linalg.norm(p, axis=1) - 0.6  # noqa: E731
        raw = extract_mesh(field, resolution=32, smooth=False)
        smoothed = extract_mesh(field, resolution=32, smooth=True)
        assert len(raw.vertices) == len(smoothed.vertices)
        assert not np.array_equal(raw.vertices, smoothed.vertices)


class TestSurfaceSampling:
    def test_samples_lie_on_surface(self, sphere_mesh, rng):
        pts = sample_surface(sphere_mesh, 2000, rng)
        radii = np.linalg.norm(pts, axis=1)
        assert np.abs(radii - 0.6).max() < 0.01  # within mesh discretization

    def test_seeded_determinism(self, sphere_mesh):
        a = sample_surface(sphere_mesh, 100, np.random.default_rng(5))
        b = sample_surface(sphere_mesh, 100, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_empty_raises(self, rng):
        with pytest.raises(InputError):
            sample_surface(empty_mesh(), 10, rng)


class TestNormalize:
    def test_centers_and_scales(self, sphere_mesh):
        shifted = TriangleMesh(sphere_mesh.vertices + np.array([1.0, -2.0, 0.5]), sphere_mesh.faces)
        normed, tf = normalize_mesh(shifted, target_radius=0.9)
        r = np.linalg.norm(normed.vertices, axis=1).max()
        assert r == pytest.approx(0.9, rel=1e-9)
        restored = normed.vertices * tf["scale"] + np.asarray(tf["center"])
        np.testing.assert_allclose(restored, shifted.vertices, atol=1e-9)

"""SDF sampling and the on-disk formats."""

import numpy as np
import pytest

from shapedis.errors import FormatError, InputError
from shapedis.geometry import (
    AnalyticShape,
    SampleSet,
    ShapeMeta,
    empty_mesh,
    read_metadata_csv,
    read_obj,
    read_ply,
    read_sample_cache,
    sample_shape,
    write_metadata_csv,
    write_obj,
    write_ply,
    write_sample_cache,
)

from test_geometry_mesh import unit_cube_mesh


class TestSampleShape:
    def test_composition_and_dtypes(self):
        shape = AnalyticShape(kind="lobed-blob", disease_severity=0.5, rng_seed=4)
        ss = sample_shape(shape, 2000, shape_id="s", seed=1)
        assert len(ss) == 2000
        assert ss.points.dtype == np.float32 and ss.sdf.dtype == np.float32
        # 95% surface-biased: most values hug the surface
        assert (np.abs(ss.sdf) < 0.2).mean() > 0.9

    def test_values_match_field(self):
        shape = AnalyticShape(kind="sphere", base_radius=0.5)
        ss = sample_shape(shape, 512, seed=2)
        exact = shape.sdf(ss.points.astype(np.float64))
        np.testing.assert_allclose(ss.sdf, exact, atol=1e-6)

    def test_uniform_tail_present(self):
        shape = AnalyticShape(kind="sphere", base_radius=0.4)
        ss = sample_shape(shape, 4000, seed=3)
        assert (ss.sdf > 0.3).sum() > 0  # far-field points exist

    def test_seeded_determinism(self):
        shape = AnalyticShape(kind="lobed-blob", rng_seed=9)
        a = sample_shape(shape, 256, seed=7)
        b = sample_shape(shape, 256, seed=7)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.sdf, b.sdf)
        c = sample_shape(shape, 256, seed=8)
        assert not np.array_equal(a.points, c.points)

    def test_mesh_input(self):
        mesh = unit_cube_mesh()
        ss = sample_shape(mesh, 512, shape_id="cube", seed=5)
        assert len(ss) == 512
        assert np.isfinite(ss.sdf).all()

    def test_validation(self):
        shape = AnalyticShape(kind="sphere")
        with pytest.raises(InputError):
            sample_shape(shape, 0)
        with pytest.raises(InputError):
            sample_shape(shape, 10, surface_fraction=1.5)
        with pytest.raises(InputError):
            sample_shape(empty_mesh(), 10)
        with pytest.raises(InputError):
            sample_shape("not a shape", 10)

    def test_sampleset_length_mismatch(self):
        with pytest.raises(InputError):
            SampleSet("x", np.zeros((3, 3)), np.zeros(2))


class TestSampleCache:
    def test_roundtrip_bit_exact(self, tmp_path):
        shape = AnalyticShape(kind="lobed-blob", rng_seed=1)
        ss = sample_shape(shape, 333, shape_id="abc", seed=0)
        path = tmp_path / "s.sdf"
        write_sample_cache(ss, path)
        back = read_sample_cache(path, shape_id="abc")
        assert np.array_equal(ss.points, back.points)
        assert np.array_equal(ss.sdf, back.sdf)
        assert back.shape_id == "abc"

    def test_header_layout(self, tmp_path):
        ss = SampleSet("x", np.zeros((2, 3), dtype=np.float32), np.ones(2, dtype=np.float32))
        path = tmp_path / "s.sdf"
        write_sample_cache(ss, path)
        raw = path.read_bytes()
        assert raw[:4] == b"SDF1"
        assert len(raw) == 12 + 16 * 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sdf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_sample_cache(path)

    def test_truncated(self, tmp_path):
        ss = SampleSet("x", np.zeros((4, 3), dtype=np.float32), np.ones(4, dtype=np.float32))
        path = tmp_path / "s.sdf"
        write_sample_cache(ss, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_sample_cache(path)


class TestMeshFormats:
    def test_obj_roundtrip(self, tmp_path, sphere_mesh):
        path = tmp_path / "m.obj"
        write_obj(sphere_mesh, path)
        back = read_obj(path)
        np.testing.assert_array_equal(back.faces, sphere_mesh.faces)
        np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=0)

    def test_obj_one_based_indices(self, tmp_path):
        path = tmp_path / "tri.obj"
        write_obj(unit_cube_mesh(), path)
        first_face = next(ln for ln in path.read_text().splitlines() if ln.startswith("f "))
        assert first_face.split()[1:] == ["1", "3", "2"]

    def test_obj_quad_triangulation(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = read_obj(path)
        assert len(mesh.faces) == 2

    def test_obj_slash_indices(self, tmp_path):
        path = tmp_path / "slash.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
        mesh = read_obj(path)
        assert len(mesh.faces) == 1

    def test_obj_errors(self, tmp_path):
        bad = tmp_path / "bad.obj"
        bad.write_text("f 1 2 3\n")
        with pytest.raises(FormatError):
            read_obj(bad)
        neg = tmp_path / "neg.obj"
        neg.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -1 -2 -3\n")
        with pytest.raises(FormatError):
            read_obj(neg)

    def test_ply_roundtrip(self, tmp_path, sphere_mesh):
        path = tmp_path / "m.ply"
        write_ply(sphere_mesh, path)
        back = read_ply(path)
        np.testing.assert_array_equal(back.faces, sphere_mesh.faces)
        np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=0)

    def test_ply_rejects_binary(self, tmp_path):
        path = tmp_path / "b.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(FormatError):
            read_ply(path)

    def test_ply_rejects_non_ply(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_text("not a ply\n")
        with pytest.raises(FormatError):
            read_ply(path)


class TestMetadataCsv:
    def test_roundtrip(self, tmp_path, small_cohort):
        _, metas = small_cohort
        path = tmp_path / "meta.csv"
        write_metadata_csv(metas, path)
        back = read_metadata_csv(path)
        assert [m.shape_id for m in back] == [m.shape_id for m in metas]
        assert [m.age for m in back] == [m.age for m in metas]
        assert [m.diagnosis for m in back] == [m.diagnosis for m in metas]
        assert [m.split for m in back] == [m.split for m in metas]
        np.testing.assert_allclose(
            [m.age_norm for m in back], [m.age_norm for m in metas], atol=1e-15
        )

    def test_unlabeled_diagnosis(self, tmp_path):
        metas = [
            ShapeMeta("a", 60.0, None, "train"),
            ShapeMeta("b", 70.0, 1, "test"),
        ]
        path = tmp_path / "meta.csv"
        write_metadata_csv(metas, path)
        assert ",,," not in path.read_text()  # diagnosis column empty, not missing
        back = read_metadata_csv(path)
        assert back[0].diagnosis is None and back[1].diagnosis == 1

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "meta.csv"
        path.write_text("id,age,dx,split\na,60,0,train\n")
        with pytest.raises(FormatError):
            read_metadata_csv(path)

    def test_bad_rows(self, tmp_path):
        cases = [
            "shape_id,age,diagnosis,split\na,sixty,0,train\n",
            "shape_id,age,diagnosis,split\na,60,2,train\n",
            "shape_id,age,diagnosis,split\na,60,0,holdout\n",
            "shape_id,age,diagnosis,split\na,60,0,train\na,61,0,train\n",
        ]
        for text in cases:
            path = tmp_path / "meta.csv"
            path.write_text(text)
            with pytest.raises(FormatError):
                read_metadata_csv(path)

"""On-disk formats: OBJ / ASCII PLY meshes, SDF sample caches, metadata CSV.

All writers format floats with repr-exact precision so files hash
deterministically and values round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .mesh import TriangleMesh
from .sampling import SampleSet
from .shapes import SPLITS, ShapeMeta, assign_age_norm

CACHE_MAGIC = b"SDF1"
METADATA_COLUMNS = ["shape_id", "age", "diagnosis", "split"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------- OBJ


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    """Wavefront OBJ, vertices then faces, 1-based indices."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path: str | Path, shape_id: str = "") -> TriangleMesh:
    """Reads v/f records; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    i = int(head)
                    if i < 0:
                        raise FormatError(f"{path}:{lineno}: negative OBJ indices unsupported")
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # other records (vn, vt, o, g, usemtl, ...) are ignored
    if not vertices:
        raise FormatError(f"{path}: no vertices found")
    return TriangleMesh(np.asarray(vertices), np.asarray(faces, dtype=np.int64).reshape(-1, 3), shape_id)


# ---------------------------------------------------------------- PLY (ascii)


def write_ply(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path: str | Path, shape_id: str = "") -> TriangleMesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_vert = n_face = None
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise FormatError(f"{path}: only ascii PLY is supported")
        elif parts[0] == "element":
            if parts[1] == "vertex":
                n_vert = int(parts[2])
            elif parts[1] == "face":
                n_face = int(parts[2])
        elif parts[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None or n_vert is None or n_face is None:
        raise FormatError(f"{path}: malformed PLY header")
    body = [ln for ln in lines[body_at:] if ln]
    if len(body) < n_vert + n_face:
        raise FormatError(f"{path}: truncated PLY body")
    verts = np.array([[float(x) for x in body[i].split()[:3]] for i in range(n_vert)])
    faces = []
    for i in range(n_face):
        parts = body[n_vert + i].split()
        cnt = int(parts[0])
        idx = [int(x) for x in parts[1 : 1 + cnt]]
        if cnt < 3:
            raise FormatError(f"{path}: face with fewer than 3 vertices")
        for k in range(1, cnt - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3), shape_id)


# ---------------------------------------------------------------- sample cache


def write_sample_cache(samples: SampleSet, path: str | Path) -> None:
    """Binary cache: magic 'SDF1', uint32 count, uint32 reserved, then
    count * (x, y, z, sdf) little-endian float32 records."""
    m = len(samples)
    rows = np.empty((m, 4), dtype="<f4")
    rows[:, :3] = samples.points
    rows[:, 3] = samples.sdf
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", m, 0))
        fh.write(rows.tobytes())


def read_sample_cache(path: str | Path, shape_id: str = "") -> SampleSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic, not an SDF sample cache")
    m, _reserved = struct.unpack("<II", raw[4:12])
    expected = 12 + 16 * m
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated cache (expected {expected} bytes, got {len(raw)})")
    rows = np.frombuffer(raw, dtype="<f4", offset=12).reshape(m, 4)
    return SampleSet(shape_id=shape_id, points=rows[:, :3].copy(), sdf=rows[:, 3].copy())


# ---------------------------------------------------------------- metadata CSV


def write_metadata_csv(metas: list[ShapeMeta], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_COLUMNS)
        for m in metas:
            diag = "" if m.diagnosis is None else str(int(m.diagnosis))
            writer.writerow([m.shape_id, _fmt(m.age), diag, m.split])


def read_metadata_csv(path: str | Path) -> list[ShapeMeta]:
    """Reads the cohort table; age_norm is recomputed over the file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METADATA_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(METADATA_COLUMNS)}")
        metas: list[ShapeMeta] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns")
            shape_id, age_s, diag_s, split = row
            if shape_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate shape_id {shape_id!r}")
            seen.add(shape_id)
            try:
                age = float(age_s)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad age {age_s!r}") from exc
            if diag_s == "":
                diagnosis = None
            else:
                try:
                    diagnosis = int(diag_s)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad diagnosis {diag_s!r}") from exc
                if diagnosis not in (0, 1):
                    raise FormatError(f"{path}:{lineno}: diagnosis must be 0 or 1")
            if split not in SPLITS:
                raise FormatError(f"{path}:{lineno}: split must be one of {SPLITS}")
            metas.append(ShapeMeta(shape_id=shape_id, age=age, diagnosis=diagnosis, split=split))
    assign_age_norm(metas)
    return metas

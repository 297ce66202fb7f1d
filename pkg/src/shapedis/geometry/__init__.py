"""Analytic shapes, meshes, sampling, distances, and their file formats."""

from .io import (
    read_metadata_csv,
    read_obj,
    read_ply,
    read_sample_cache,
    write_metadata_csv,
    write_obj,
    write_ply,
    write_sample_cache,
)
from .mesh import (
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
from .meshdist import MeshDistanceField
from .metrics import chamfer_distance
from .sampling import SampleSet, sample_shape
from .shapes import (
    KINDS,
    AnalyticShape,
    ShapeMeta,
    assign_age_norm,
    evaluate_sdf,
    generate_cohort,
    surface_points,
)

__all__ = [
    "AnalyticShape",
    "EmptyLevelSetWarning",
    "KINDS",
    "MeshDistanceField",
    "OpenMeshWarning",
    "SampleSet",
    "ShapeMeta",
    "TriangleMesh",
    "assign_age_norm",
    "chamfer_distance",
    "empty_mesh",
    "evaluate_sdf",
    "extract_mesh",
    "generate_cohort",
    "is_closed",
    "laplacian_smooth",
    "mesh_volume",
    "normalize_mesh",
    "read_metadata_csv",
    "read_obj",
    "read_ply",
    "read_sample_cache",
    "sample_shape",
    "sample_surface",
    "signed_volume",
    "surface_points",
    "write_metadata_csv",
    "write_obj",
    "write_ply",
    "write_sample_cache",
]

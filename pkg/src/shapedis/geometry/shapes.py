"""Analytic signed-distance shape family and synthetic cohort generation.

Shapes live in the unit cube [-1, 1]^3 and always contain the origin. Each
shape is a base kind (sphere, superellipsoid, lobed-blob) modulated by two
scalar covariates:

* ``disease_severity`` in [0, 1]: shrinks volume by up to 40% (uniform scale)
  and carves a seeded surface dent whose radius grows with severity. Severity
  0 reproduces the base shape bit-exactly.
* ``age_factor`` in [0, 1]: volume-preserving elongation along z of up to 15%
  (x and y shrink by the matching factor), so age moves shape modes without
  touching volume.

Fields are exact signed distances for the sphere; for the other kinds the
zero set and sign are exact and the magnitude is a conservative lower bound,
which is what sampling and meshing need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ConfigError, InputError

KINDS = ("sphere", "superellipsoid", "lobed-blob")

# The disease factor must dominate per-shape identity jitter in any faithful
# embedding, mirroring atrophy-driven cohorts: keep the bump amplitudes well
# below the class-driven scale swing.
SEVERITY_VOLUME_SHRINK = 0.4   # fraction of volume lost at severity 1 (scale term)
AGE_MAX_ELONGATION = 0.15      # z elongation factor at age_factor 1
DENT_RADIUS_FRAC = 0.3         # dent ball radius relative to the scaled base radius
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class AnalyticShape:
    """Immutable description of one synthetic shape instance."""

    kind: str = "lobed-blob"
    base_radius: float = 0.55
    disease_severity: float = 0.0
    age_factor: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"kind: unknown shape kind {self.kind!r}, expected one of {KINDS}")
        if not (0.0 < self.base_radius <= 0.95):
            raise InputError("base_radius: must be in (0, 0.95] to fit the unit cube")
        if not (0.0 <= self.disease_severity <= 1.0):
            raise InputError("disease_severity: must be in [0, 1]")
        if not (0.0 <= self.age_factor <= 1.0):
            raise InputError("age_factor: must be in [0, 1]")

    def sdf(self, points) -> np.ndarray:
        """Signed distance at one point (3,) or a batch (m, 3)."""
        return evaluate_sdf(self, points)


@dataclass
class ShapeMeta:
    """Per-shape cohort record.

    ``age_norm`` is the cohort-normalized age, (age - min) / (max - min) over
    the cohort the record belongs to. ``diagnosis`` is the binary class (1 =
    diseased) when known, None when unlabeled. ``severity`` is generator
    ground truth and is not serialized.
    """

    shape_id: str
    age: float
    diagnosis: int | None
    split: str
    age_norm: float = 0.0
    severity: float | None = None


@lru_cache(maxsize=8192)
def _shape_params(shape: AnalyticShape) -> dict:
    """Seeded per-shape parameters, drawn in a fixed order for determinism."""
    rng = np.random.default_rng(shape.rng_seed)
    axis_jitter = rng.uniform(-0.02, 0.02, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=2)
    amp_jitter = rng.uniform(-0.005, 0.005, size=2)
    raw = rng.normal(size=3)
    norm = np.linalg.norm(raw)
    dent_dir = raw / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
    return {
        "axes": shape.base_radius * np.array([1.0, 0.82, 0.66]) * (1.0 + axis_jitter),
        "phases": phases,
        "amps": np.array([0.02, 0.014]) + amp_jitter,
        "dent_dir": dent_dir,
    }


def _base_sdf(shape: AnalyticShape, q: np.ndarray) -> np.ndarray:
    """Field of the unmodulated base kind, evaluated in the canonical frame."""
    params = _shape_params(shape)
    r = shape.base_radius
    if shape.kind == "sphere":
        return np.linalg.norm(q, axis=1) - r
    if shape.kind == "superellipsoid":
        a = params["axes"]
        val = np.sum(np.abs(q / a) ** 4, axis=1) ** 0.25
        return (val - 1.0) * np.min(a)
    # lobed-blob: radial profile modulated by low-order angular harmonics.
    # sin(theta)^3 kills the azimuthal term at the poles, keeping the field
    # continuous where the azimuth is undefined. The polar term is recentred
    # by its spherical mean (-cos(ph)/3) so seed jitter stays volume-neutral
    # to first order and volume ordering is governed by severity alone.
    dist = np.linalg.norm(q, axis=1)
    safe = np.where(dist > 1e-12, dist, 1.0)
    d = q / safe[:, None]
    d = np.where(dist[:, None] > 1e-12, d, np.array([0.0, 0.0, 1.0]))
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    ph = params["phases"]
    amp = params["amps"]
    polar = np.cos(2.0 * theta + ph[1]) + np.cos(ph[1]) / 3.0
    radius = r * (
        1.0
        + amp[0] * np.sin(3.0 * phi + ph[0]) * np.sin(theta) ** 3
        + amp[1] * polar
    )
    return dist - radius


def _scale_factors(shape: AnalyticShape) -> tuple[float, float]:
    """(uniform severity scale g, z-elongation e)."""
    g = (1.0 - SEVERITY_VOLUME_SHRINK * shape.disease_severity) ** (1.0 / 3.0)
    e = 1.0 + AGE_MAX_ELONGATION * shape.age_factor
    return g, e


def _pre_dent_sdf(shape: AnalyticShape, p: np.ndarray) -> np.ndarray:
    """Composed field before dent subtraction. p is (m, 3) float64."""
    g, e = _scale_factors(shape)
    se = math.sqrt(e)
    q = np.empty_like(p)
    q[:, 0] = p[:, 0] * se
    q[:, 1] = p[:, 1] * se
    q[:, 2] = p[:, 2] / e
    f = _base_sdf(shape, q / g) * g
    if e != 1.0:
        f = f / se  # conservative magnitude under the anisotropic warp
    return f


@lru_cache(maxsize=8192)
def _dent(shape: AnalyticShape) -> tuple[tuple[float, float, float], float] | None:
    """Dent ball (center, radius) in world space, or None at severity 0.

    The center sits on the pre-dent surface along a seeded direction, found
    by bisection from the origin (always interior) out to radius 2 (always
    exterior in the unit-cube setup).
    """
    if shape.disease_severity <= 0.0:
        return None
    u = _shape_params(shape)["dent_dir"]
    lo, hi = 0.0, 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _pre_dent_sdf(shape, (mid * u)[None, :])[0] < 0.0:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    g, _ = _scale_factors(shape)
    radius = DENT_RADIUS_FRAC * shape.disease_severity * shape.base_radius * g
    center = u * t
    return (float(center[0]), float(center[1]), float(center[2])), float(radius)


def evaluate_sdf(shape: AnalyticShape, points) -> np.ndarray:
    """Evaluate the shape's signed-distance field.

    Accepts (3,) or (m, 3); returns a scalar array () or (m,) of float64.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != 3:
        raise InputError(f"points: expected (m, 3) array, got shape {p.shape}")
    f = _pre_dent_sdf(shape, p)
    dent = _dent(shape)
    if dent is not None:
        center, radius = dent
        ball = np.linalg.norm(p - np.asarray(center), axis=1) - radius
        f = np.maximum(f, -ball)
    return f[0] if single else f


def surface_points(shape: AnalyticShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points on the zero level set, found by radial bisection.

    Every returned point satisfies |sdf| <= 1e-6: the field is negative at the
    origin and positive at radius 2, so bisection always brackets a crossing.
    """
    if n <= 0:
        return np.zeros((0, 3))
    dirs = rng.normal(size=(n, 3))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    dirs = dirs / norms
    lo = np.zeros(n)
    hi = np.full(n, 2.0)
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        inside = evaluate_sdf(shape, dirs * mid[:, None]) < 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return dirs * (0.5 * (lo + hi))[:, None]


def assign_age_norm(metas: list[ShapeMeta]) -> None:
    """Set age_norm in place from the observed cohort age range."""
    if not metas:
        return
    ages = np.array([m.age for m in metas], dtype=np.float64)
    lo, hi = float(ages.min()), float(ages.max())
    span = hi - lo
    for m in metas:
        m.age_norm = (m.age - lo) / span if span > 0 else 0.0


def generate_cohort(
    n_shapes: int,
    class_balance: float = 0.5,
    age_range: tuple[float, float] = (55.0, 90.0),
    kind: str = "lobed-blob",
    base_radius: float = 0.55,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[AnalyticShape], list[ShapeMeta]]:
    """Seeded synthetic cohort with two diagnosis classes.

    Class 1 ("diseased") draws severity around 0.82, class 0 around 0.18, so
    class-1 shapes are strictly smaller in expectation. Ages are uniform on
    ``age_range`` and drive the volume-neutral elongation. Splits are
    stratified per class.
    """
    if n_shapes < 2:
        raise ConfigError("n_shapes: need at least 2 shapes")
    if not (0.0 < class_balance < 1.0):
        raise ConfigError("class_balance: must be strictly between 0 and 1")
    lo_age, hi_age = age_range
    if not (hi_age > lo_age):
        raise ConfigError("age_range: min must be strictly below max")
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown shape kind {kind!r}")
    fr = np.asarray(split_fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ConfigError("split_fractions: three non-negative values summing to 1")

    rng = np.random.default_rng(seed)
    n1 = int(np.clip(round(n_shapes * class_balance), 1, n_shapes - 1))
    labels = np.array([1] * n1 + [0] * (n_shapes - n1))
    rng.shuffle(labels)

    sev = np.empty(n_shapes)
    c0 = labels == 0
    sev[c0] = np.clip(rng.normal(0.18, 0.10, size=int(c0.sum())), 0.0, 0.45)
    sev[~c0] = np.clip(rng.normal(0.82, 0.10, size=int((~c0).sum())), 0.55, 1.0)

    ages = rng.uniform(lo_age, hi_age, size=n_shapes)
    span = ages.max() - ages.min()
    age_norm = (ages - ages.min()) / span if span > 0 else np.zeros(n_shapes)
    shape_seeds = rng.integers(0, 2**31 - 1, size=n_shapes)

    splits = np.empty(n_shapes, dtype=object)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        m = len(idx)
        n_test = int(round(m * fr[2]))
        n_val = int(round(m * fr[1]))
        n_train = m - n_val - n_test
        if n_train < 1 and m >= 1:  # keep at least one training shape per class
            n_train = 1
            n_val = max(0, n_val - 1)
            n_test = m - n_train - n_val
        assign = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        for i, s in zip(idx, assign):
            splits[i] = s

    shapes, metas = [], []
    for i in range(n_shapes):
        shapes.append(
            AnalyticShape(
                kind=kind,
                base_radius=base_radius,
                disease_severity=float(sev[i]),
                age_factor=float(age_norm[i]),
                rng_seed=int(shape_seeds[i]),
            )
        )
        metas.append(
            ShapeMeta(
                shape_id=f"shape_{i:04d}",
                age=float(ages[i]),
                diagnosis=int(labels[i]),
                split=str(splits[i]),
                age_norm=float(age_norm[i]),
                severity=float(sev[i]),
            )
        )
    return shapes, metas

"""Disentanglement and downstream metrics over the learned latent space.

Everything here is deterministic: latents are posterior means, scores are
closed-form, and the label-mixing sweep derives all randomness from the
seeds it is handed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import InputError
from .geometry.metrics import chamfer_distance
from .geometry.shapes import AnalyticShape, ShapeMeta, surface_points
from .pseudo_labels import PseudoLabeling
from .stage1.decoder import CodeTable, SdfDecoder
from .stage1.training import reconstruct_shape
from .stage2.networks import CodeDecoder, CodeEncoder
from .stage2.training import DisentangleConfig, encode_codes, train_stage2

FACTORS = ("disease", "age")


# ------------------------------------------------------------------ latents


@dataclass
class LatentTable:
    """Posterior-mean latents joined with evaluation covariates."""

    shape_ids: list[str]
    latents: np.ndarray   # (n, k) float64
    disease: np.ndarray   # (n,) int, true labels
    age: np.ndarray       # (n,) float, normalized
    splits: list[str]

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.disease = np.asarray(self.disease, dtype=np.int64)
        self.age = np.asarray(self.age, dtype=np.float64)
        n = len(self.shape_ids)
        if self.latents.ndim != 2 or self.latents.shape[0] != n:
            raise InputError("latents: expected one (k,) row per shape_id")
        if self.disease.shape != (n,) or self.age.shape != (n,) or len(self.splits) != n:
            raise InputError("covariates: every scored row needs disease, age, split")

    def __len__(self) -> int:
        return len(self.shape_ids)

    @property
    def dim(self) -> int:
        return self.latents.shape[1]

    def factor_values(self, factor: str) -> np.ndarray:
        if factor == "disease":
            return self.disease.astype(np.float64)
        if factor == "age":
            return self.age
        raise InputError(f"factor: expected one of {FACTORS}, got {factor!r}")

    def subset(self, split: str) -> "LatentTable":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        if not keep:
            raise InputError(f"split: no rows tagged {split!r}")
        return LatentTable(
            [self.shape_ids[i] for i in keep],
            self.latents[keep],
            self.disease[keep],
            self.age[keep],
            [self.splits[i] for i in keep],
        )


def build_latent_table(
    encoder: CodeEncoder, codes: CodeTable, metas: list[ShapeMeta]
) -> LatentTable:
    """Encode every shape in the table; metas must carry true labels."""
    by_id = {m.shape_id: m for m in metas}
    missing = [sid for sid in codes.shape_ids if sid not in by_id]
    if missing:
        raise InputError(f"metas: missing records for {missing[:3]}...")
    unlabeled = [sid for sid in codes.shape_ids if by_id[sid].diagnosis is None]
    if unlabeled:
        raise InputError(
            f"metas: evaluation needs true diagnoses; missing for {unlabeled[:3]}..."
        )
    means, _ = encode_codes(encoder, codes)
    return LatentTable(
        list(codes.shape_ids),
        means,
        np.array([by_id[sid].diagnosis for sid in codes.shape_ids]),
        np.array([by_id[sid].age_norm for sid in codes.shape_ids]),
        [by_id[sid].split for sid in codes.shape_ids],
    )


# ------------------------------------------------------------------ scores


def _threshold_accuracy(x: np.ndarray, y: np.ndarray) -> float:
    """Best 1-D threshold classifier accuracy, both polarities, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    xs = np.unique(x)
    best = max(float(np.mean(y == 0)), float(np.mean(y == 1)))  # degenerate thresholds
    if len(xs) > 1:
        cuts = 0.5 * (xs[:-1] + xs[1:])
        above = x[None, :] > cuts[:, None]
        acc_pos = np.mean(above == (y[None, :] == 1), axis=1)
        acc_neg = np.mean(~above == (y[None, :] == 1), axis=1)
        best = max(best, float(acc_pos.max()), float(acc_neg.max()))
    return best


def _linear_r2(x: np.ndarray, y: np.ndarray) -> float:
    """R^2 of the best 1-D linear fit; squared Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx = x.std()
    if sx == 0.0:
        return 0.0  # constant dimension predicts nothing
    r = np.corrcoef(x, y)[0, 1]
    return float(r * r)


def dimension_scores(latents: np.ndarray, values: np.ndarray, kind: str) -> np.ndarray:
    """Per-dimension predictiveness of one factor.

    kind="binary" scores a 1-D threshold classifier's accuracy;
    kind="continuous" the R^2 of a 1-D linear regression.
    """
    latents = np.asarray(latents, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if latents.ndim != 2 or values.shape != (latents.shape[0],):
        raise InputError("latents (n,k) and values (n,) expected")
    if len(np.unique(values)) < 2:
        raise InputError("values: factor is constant, nothing to predict")
    if kind == "binary":
        fn = lambda col: _threshold_accuracy(col, values.astype(np.int64))  # noqa: E731
    elif kind == "continuous":
        fn = lambda col: _linear_r2(col, values)  # noqa: E731
    else:
        raise InputError("kind: expected 'binary' or 'continuous'")
    return np.array([fn(latents[:, j]) for j in range(latents.shape[1])])


def sap_score(table: LatentTable, factor: str) -> float:
    """Gap between the best and second-best per-dimension factor scores."""
    values = table.factor_values(factor)
    kind = "binary" if factor == "disease" else "continuous"
    scores = dimension_scores(table.latents, values, kind)
    if len(scores) < 2:
        raise InputError("latents: need at least 2 dimensions for a score gap")
    top2 = np.sort(scores)[-2:]
    return float(top2[1] - top2[0])


def pearson_corr(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise InputError("x/y: matching 1-D arrays with >= 2 samples expected")
    if x.std() == 0.0 or y.std() == 0.0:
        raise InputError("x/y: zero variance, correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def spearman_corr(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise InputError("x/y: matching 1-D arrays with >= 2 samples expected")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # constant input becomes our error below
        rho = stats.spearmanr(x, y).statistic
    if np.isnan(rho):
        raise InputError("x/y: rank correlation undefined (constant input)")
    return float(rho)


# ------------------------------------------------------------------ kNN


@dataclass
class KnnResult:
    predictions: np.ndarray
    score: float          # accuracy in percent (classify) or RMSE (regress)
    k_used: int
    clamped: bool


def knn_predict(
    train_x, train_y, test_x, test_y, mode: str = "classify", k_neighbors: int = 5
) -> KnnResult:
    """1-D k-nearest-neighbour prediction on a designated latent coordinate.

    Vote ties go to the nearest neighbour whose label is among the tied
    classes; neighbour order itself breaks distance ties by train index.
    A too-large k is clamped to the train size and flagged.
    """
    train_x = np.asarray(train_x, dtype=np.float64).ravel()
    train_y = np.asarray(train_y, dtype=np.float64).ravel()
    test_x = np.asarray(test_x, dtype=np.float64).ravel()
    test_y = np.asarray(test_y, dtype=np.float64).ravel()
    if len(train_x) == 0:
        raise InputError("train_x: empty training set")
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise InputError("train/test inputs misaligned")
    if mode not in ("classify", "regress"):
        raise InputError("mode: expected 'classify' or 'regress'")
    if k_neighbors < 1:
        raise InputError("k_neighbors: must be >= 1")
    clamped = k_neighbors > len(train_x)
    k = min(k_neighbors, len(train_x))

    preds = np.empty(len(test_x))
    for i, xq in enumerate(test_x):
        d = np.abs(train_x - xq)
        order = np.lexsort((np.arange(len(d)), d))[:k]
        ny = train_y[order]
        if mode == "regress":
            preds[i] = ny.mean()
            continue
        classes, counts = np.unique(ny, return_counts=True)
        tied = classes[counts == counts.max()]
        if len(tied) == 1:
            preds[i] = tied[0]
        else:
            tied_set = set(tied.tolist())
            preds[i] = next(v for v in ny if v in tied_set)
    if mode == "classify":
        score = 100.0 * float(np.mean(preds == test_y))
    else:
        score = float(np.sqrt(np.mean((preds - test_y) ** 2)))
    return KnnResult(predictions=preds, score=score, k_used=k, clamped=clamped)


def knn_report(
    train: LatentTable,
    test: LatentTable,
    disease_coord: int = 0,
    age_coord: int = 1,
    k_neighbors: int = 5,
) -> dict:
    """Designated-coordinate kNN scores on both splits, paper-style."""
    out: dict[str, dict[str, float]] = {"disease_accuracy": {}, "age_rmse": {}}
    for name, tbl in (("train", train), ("test", test)):
        out["disease_accuracy"][name] = knn_predict(
            train.latents[:, disease_coord],
            train.disease,
            tbl.latents[:, disease_coord],
            tbl.disease,
            mode="classify",
            k_neighbors=k_neighbors,
        ).score
        out["age_rmse"][name] = knn_predict(
            train.latents[:, age_coord],
            train.age,
            tbl.latents[:, age_coord],
            tbl.age,
            mode="regress",
            k_neighbors=k_neighbors,
        ).score
    return out


# ------------------------------------------------------- reconstruction


@dataclass
class ReconstructionReport:
    stage1_cd: float
    stage2_cd: float | None
    per_shape: dict[str, dict]
    excluded: list[str]
    n_points: int

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)


def make_roundtrip_transform(encoder: CodeEncoder, decoder: CodeDecoder):
    """codes -> decoder(encoder(codes).mean), as a numpy (n, d) transform."""
    import torch

    def transform(codes: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = torch.from_numpy(np.asarray(codes, dtype=np.float32))
            return decoder(encoder(z).mean).numpy()

    return transform


def reconstruction_report(
    renderer: SdfDecoder,
    codes: CodeTable,
    shapes: dict[str, AnalyticShape],
    code_transform=None,
    n_points: int = 4096,
    resolution: int = 48,
    seed: int = 0,
) -> ReconstructionReport:
    """Chamfer distance between true surfaces and rendered reconstructions.

    Stage-1 renders codes directly; when ``code_transform`` is given the
    round-tripped codes are rendered too. Shapes whose extraction comes
    back empty are excluded from the means and flagged.
    """
    missing = [sid for sid in codes.shape_ids if sid not in shapes]
    if missing:
        raise InputError(f"shapes: missing ground truth for {missing[:3]}...")
    transformed = None
    if code_transform is not None:
        transformed = np.asarray(code_transform(codes.codes), dtype=np.float64)
        if transformed.shape != codes.codes.shape:
            raise InputError("code_transform: must preserve the (n, d) code shape")

    rng = np.random.default_rng(seed)
    per_shape: dict[str, dict] = {}
    excluded: list[str] = []
    s1_vals, s2_vals = [], []
    import warnings

    for i, sid in enumerate(codes.shape_ids):
        truth = surface_points(shapes[sid], n_points, rng)
        entry: dict[str, float | None] = {"stage1": None, "stage2": None}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mesh1 = reconstruct_shape(renderer, codes.codes[i], resolution=resolution)
        bad = mesh1.is_empty
        if not bad:
            entry["stage1"] = chamfer_distance(mesh1, truth, n_samples=n_points, seed=seed)
        if transformed is not None and not bad:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mesh2 = reconstruct_shape(renderer, transformed[i], resolution=resolution)
            if mesh2.is_empty:
                bad = True
            else:
                entry["stage2"] = chamfer_distance(mesh2, truth, n_samples=n_points, seed=seed)
        if bad:
            excluded.append(sid)
        else:
            s1_vals.append(entry["stage1"])
            if transformed is not None:
                s2_vals.append(entry["stage2"])
        per_shape[sid] = entry
    if not s1_vals:
        raise InputError("reconstruction: every shape produced an empty mesh")
    return ReconstructionReport(
        stage1_cd=float(np.mean(s1_vals)),
        stage2_cd=float(np.mean(s2_vals)) if transformed is not None else None,
        per_shape=per_shape,
        excluded=excluded,
        n_points=n_points,
    )


# ------------------------------------------------------- label mixing


@dataclass
class SweepCell:
    values: list[float]
    mean: float
    std: float


@dataclass
class SweepResult:
    fractions: list[float]
    policies: list[str]
    seeds: list[int]
    cells: dict[str, dict[str, SweepCell | None]]  # policy -> "%g" fraction -> cell

    def cell(self, policy: str, fraction: float) -> SweepCell | None:
        return self.cells[policy][f"{fraction:g}"]


def _seed_stats(values: list[float]) -> SweepCell:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return SweepCell(values=[float(v) for v in values], mean=float(arr.mean()), std=std)


def _reveal_subset(metas: list[ShapeMeta], fraction: float, rng) -> set[str]:
    """Stratified fraction of shapes whose true label is revealed."""
    revealed: set[str] = set()
    for cls in (0, 1):
        members = sorted(m.shape_id for m in metas if m.diagnosis == cls)
        n_pick = int(round(fraction * len(members)))
        if n_pick > 0:
            picks = rng.choice(len(members), size=n_pick, replace=False)
            revealed.update(members[i] for i in picks)
    return revealed


def label_mixing_sweep(
    codes: CodeTable,
    metas: list[ShapeMeta],
    pseudo: PseudoLabeling,
    fractions: list[float],
    seeds: list[int],
    config: DisentangleConfig,
    policies: tuple[str, ...] = ("real+pseudo", "real+none"),
    renderer: SdfDecoder | None = None,
    samples=None,
) -> SweepResult:
    """Disease SAP surface over (real-label fraction, fallback policy, seed).

    Each cell trains a fresh stage-2 model: revealed shapes carry their true
    label, the rest carry the pseudo label ("real+pseudo") or stay unlabeled
    ("real+none"). Scoring always uses the true labels. fraction=0 under
    "real+none" is skipped (no supervision at all).
    """
    for f in fractions:
        if not (0.0 <= f <= 1.0):
            raise InputError(f"fractions: {f} outside [0, 1]")
    for policy in policies:
        if policy not in ("real+pseudo", "real+none"):
            raise InputError(f"policies: unknown policy {policy!r}")
    if not seeds:
        raise InputError("seeds: need at least one seed")
    by_id = {m.shape_id: m for m in metas}
    unlabeled = [sid for sid in codes.shape_ids if by_id[sid].diagnosis is None]
    if unlabeled:
        raise InputError(f"metas: sweep scoring needs true labels; missing {unlabeled[:3]}...")
    pseudo_by_id = dict(zip(pseudo.shape_ids, pseudo.labels))
    age_norm = {m.shape_id: m.age_norm for m in metas}
    meta_list = [by_id[sid] for sid in codes.shape_ids]

    cells: dict[str, dict[str, SweepCell | None]] = {p: {} for p in policies}
    for policy in policies:
        for frac in fractions:
            key = f"{frac:g}"
            if policy == "real+none" and frac == 0.0:
                cells[policy][key] = None  # nothing to learn from
                continue
            values = []
            for seed in seeds:
                rng = np.random.default_rng(seed)
                revealed = _reveal_subset(meta_list, frac, rng)
                labels: dict[str, float | None] = {}
                for sid in codes.shape_ids:
                    if sid in revealed:
                        labels[sid] = float(by_id[sid].diagnosis)
                    elif policy == "real+pseudo":
                        labels[sid] = float(pseudo_by_id[sid])
                    else:
                        labels[sid] = None
                result = train_stage2(
                    codes,
                    labels,
                    age_norm,
                    replace(config, seed=seed),
                    renderer=renderer,
                    samples=samples,
                )
                table = build_latent_table(result.encoder, codes, meta_list)
                values.append(sap_score(table, "disease"))
            cells[policy][key] = _seed_stats(values)
    return SweepResult(
        fractions=[float(f) for f in fractions],
        policies=list(policies),
        seeds=list(seeds),
        cells=cells,
    )


# ------------------------------------------------------- report object


def _numeric_leaves(value):
    """Yield every numeric scalar under an arbitrarily nested metric block."""
    if isinstance(value, dict):
        for v in value.values():
            yield from _numeric_leaves(v)
    elif isinstance(value, (list, tuple, np.ndarray)):
        for v in value:
            yield from _numeric_leaves(v)
    elif isinstance(value, bool) or value is None:
        return
    elif isinstance(value, (int, float, np.integer, np.floating)):
        yield float(value)


def _pyify(obj):
    """Recursively convert numpy scalars/arrays so JSON output is canonical."""
    if isinstance(obj, dict):
        return {str(k): _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_pyify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


@dataclass
class MetricsReport:
    """Everything the evaluation stage publishes, JSON-stable by design.

    No timestamps, no absolute paths, numpy types stripped: two runs with
    identical inputs serialize to identical bytes.
    """

    config_hash: str
    seeds: list[int]
    disease: dict = field(default_factory=dict)       # sap / pearson / knn_accuracy
    age: dict = field(default_factory=dict)           # sap / pearson / knn_rmse
    reconstruction: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=dict)    # purity / volume_gap
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        # blocks nest differently per producer (per-split vs per-seed), so
        # range checks apply to every numeric leaf under the metric key
        for factor in FACTORS:
            block = getattr(self, factor)
            for v in _numeric_leaves(block.get("sap", {})):
                if not (0.0 <= v <= 1.0):
                    raise InputError(f"{factor} sap: {v} outside [0, 1]")
            for v in _numeric_leaves(block.get("pearson", {})):
                if not (-1.0 <= v <= 1.0):
                    raise InputError(f"{factor} pearson: {v} outside [-1, 1]")
        for v in _numeric_leaves(self.disease.get("knn_accuracy", {})):
            if not (0.0 <= v <= 100.0):
                raise InputError(f"knn accuracy: {v} outside [0, 100]")

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "disease": self.disease,
            "age": self.age,
            "reconstruction": self.reconstruction,
            "clustering": self.clustering,
            "extras": self.extras,
        }
        return json.dumps(_pyify(payload), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        blob = json.loads(text)
        return cls(
            config_hash=blob["config_hash"],
            seeds=blob["seeds"],
            disease=blob["disease"],
            age=blob["age"],
            reconstruction=blob["reconstruction"],
            clustering=blob["clustering"],
            extras=blob.get("extras", {}),
        )


def seed_stats(values) -> dict:
    """per-seed values with mean and sample std, JSON-ready."""
    cell = _seed_stats(list(values))
    return {"per_seed": cell.values, "mean": cell.mean, "std": cell.std}

"""Unsupervised diagnosis proxies: EM clustering of shape codes.

A fresh two-component diagonal GMM is fitted to the final stage-1 codes (the
learned training prior is not reused), shapes are assigned by posterior
argmax, and clusters are mapped to classes by mean reconstructed volume:
the smaller-volume cluster becomes label 1 ("diseased" analog).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .mixture import VAR_FLOOR, MixtureModel

PSEUDO_LABEL_COLUMNS = ["shape_id", "pseudo_label", "posterior"]


class DegenerateClusterWarning(UserWarning):
    """A cluster ended up empty or collapsed during fitting/scoring."""


@dataclass
class EmResult:
    model: MixtureModel
    log_likelihood: list[float]  # total data log-likelihood after each iteration
    n_iter: int
    converged: bool
    collapsed: bool
    restart_index: int


def _m_step(x: np.ndarray, resp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(x)
    mass = resp.sum(axis=0)
    weights = mass / n
    safe = np.where(mass > 1e-300, mass, 1.0)
    means = (resp.T @ x) / safe[:, None]
    var = np.empty_like(means)
    for m in range(len(mass)):
        diff = x - means[m]
        var[m] = (resp[:, m][:, None] * diff * diff).sum(axis=0) / safe[m]
    var = np.maximum(var, VAR_FLOOR)
    return weights, means, var


def _run_em(
    x: np.ndarray,
    n_components: int,
    max_iter: int,
    tol: float,
    rng: np.random.Generator,
) -> tuple[MixtureModel, list[float], int, bool, bool]:
    n, _ = x.shape
    data_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    means = x[rng.choice(n, size=n_components, replace=False)].copy()
    var = np.tile(data_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace: list[float] = []
    collapsed = False
    reinit_used = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        model = MixtureModel(weights, means, var)
        resp = model.responsibilities(x)
        ll = float(model.log_prob(x).sum())
        trace.append(ll)

        mass = resp.sum(axis=0)
        starving = mass < 1.0  # responsibility share below 1/n
        if starving.any():
            if reinit_used:
                collapsed = True
                break
            reinit_used = True
            for m in np.flatnonzero(starving):
                means[m] = x[rng.integers(0, n)]
                var[m] = data_var
            weights = np.full(n_components, 1.0 / n_components)
            continue

        weights, means, var = _m_step(x, resp)
        if np.any(np.all(var <= VAR_FLOOR * (1 + 1e-12), axis=1)):
            collapsed = True  # a component has no scale left in any dimension
            break
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return MixtureModel(weights, means, var), trace, it, converged, collapsed


def fit_gmm_em(
    x,
    n_components: int = 2,
    max_iter: int = 200,
    tol: float = 1e-6,
    n_restarts: int = 10,
    seed: int = 0,
) -> EmResult:
    """Best-of-restarts EM fit. The winning restart maximizes final LL.

    Collapse handling: a component whose responsibility mass drops below one
    point is re-seeded once; a second starvation, or a variance floor-out in
    every dimension, flags the restart as collapsed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("x: expected a (n, d) array")
    if len(x) < n_components:
        raise InputError(f"x: need at least {n_components} points, got {len(x)}")
    if n_components < 1:
        raise InputError("n_components: must be >= 1")
    if max_iter < 1 or n_restarts < 1:
        raise InputError("max_iter and n_restarts must be >= 1")

    rng = np.random.default_rng(seed)
    best: EmResult | None = None
    for r in range(n_restarts):
        model, trace, n_iter, converged, collapsed = _run_em(
            x, n_components, max_iter, tol, rng
        )
        candidate = EmResult(
            model=model,
            log_likelihood=trace,
            n_iter=n_iter,
            converged=converged,
            collapsed=collapsed,
            restart_index=r,
        )
        if best is None or candidate.log_likelihood[-1] > best.log_likelihood[-1]:
            best = candidate
    if best.collapsed:
        warnings.warn(
            "EM best restart flagged as collapsed; labels may be degenerate",
            DegenerateClusterWarning,
            stacklevel=2,
        )
    return best


@dataclass
class PseudoLabeling:
    shape_ids: list[str]
    labels: np.ndarray      # (n,) int
    posteriors: np.ndarray  # (n,) responsibility of the assigned cluster
    cluster_to_class: dict[int, int] | None = field(default=None)


def assign_pseudo_labels(
    model: MixtureModel,
    codes,
    shape_ids: list[str],
    volumes=None,
) -> PseudoLabeling:
    """Posterior argmax assignment (ties go to the lower component index).

    With per-shape ``volumes`` the clusters are relabeled so that label 1 is
    the smaller-mean-volume cluster; without volumes the raw cluster indices
    are the labels.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or len(codes) != len(shape_ids):
        raise InputError("codes: expected (n, d) aligned with shape_ids")
    resp = model.responsibilities(codes)
    raw = np.argmax(resp, axis=1)  # ties resolve to the lower index
    posteriors = resp[np.arange(len(raw)), raw]

    mapping = None
    labels = raw.astype(int)
    if volumes is not None:
        volumes = np.asarray(volumes, dtype=np.float64)
        if volumes.shape != (len(shape_ids),):
            raise InputError("volumes: expected one value per shape")
        mean_vol = np.full(model.n_components, np.inf)
        for m in range(model.n_components):
            members = volumes[raw == m]
            if len(members) == 0:
                warnings.warn(
                    f"cluster {m} is empty; volume ordering is degenerate",
                    DegenerateClusterWarning,
                    stacklevel=2,
                )
            else:
                mean_vol[m] = members.mean()
        order = np.argsort(mean_vol, kind="stable")  # ties keep lower index first
        mapping = {}
        smallest = int(order[0])
        for m in range(model.n_components):
            mapping[m] = 1 if m == smallest else 0
        labels = np.array([mapping[c] for c in raw], dtype=int)
    return PseudoLabeling(
        shape_ids=list(shape_ids), labels=labels, posteriors=posteriors, cluster_to_class=mapping
    )


def cluster_purity(pred_labels, true_labels, n_clusters: int | None = None) -> float:
    """Unweighted macro average of per-cluster majority fractions, percent."""
    pred = np.asarray(pred_labels).astype(int)
    true = np.asarray(true_labels)
    if pred.shape != true.shape or pred.ndim != 1 or len(pred) == 0:
        raise InputError("pred/true labels: expected equal-length non-empty 1-D arrays")
    if any(t is None for t in np.asarray(true_labels, dtype=object)):
        raise InputError("true_labels: all entries must be labeled")
    true = true.astype(int)
    clusters = range(n_clusters) if n_clusters is not None else np.unique(pred)
    fractions = []
    for c in clusters:
        members = true[pred == c]
        if len(members) == 0:
            warnings.warn(f"cluster {c} is empty", DegenerateClusterWarning, stacklevel=2)
            continue
        counts = np.bincount(members)
        fractions.append(counts.max() / len(members))
    if not fractions:
        raise InputError("no non-empty clusters")
    return 100.0 * float(np.mean(fractions))


def mean_volume_gap(labels, volumes) -> float:
    """|mean volume of class 0 - mean volume of class 1|."""
    labels = np.asarray(labels).astype(int)
    volumes = np.asarray(volumes, dtype=np.float64)
    if labels.shape != volumes.shape:
        raise InputError("labels and volumes must align")
    v0 = volumes[labels == 0]
    v1 = volumes[labels == 1]
    if len(v0) == 0 or len(v1) == 0:
        raise InputError("mean_volume_gap: both classes must be present")
    return abs(float(v0.mean()) - float(v1.mean()))


def export_pseudo_labels(labeling: PseudoLabeling, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PSEUDO_LABEL_COLUMNS)
        for sid, lab, post in zip(labeling.shape_ids, labeling.labels, labeling.posteriors):
            writer.writerow([sid, int(lab), format(float(post), ".17g")])


def load_pseudo_labels(path: str | Path) -> PseudoLabeling:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PSEUDO_LABEL_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(PSEUDO_LABEL_COLUMNS)}")
        ids, labels, posts = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns")
            try:
                lab = int(row[1])
                post = float(row[2])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed row") from exc
            if not (0.0 <= post <= 1.0):
                raise FormatError(f"{path}:{lineno}: posterior outside [0, 1]")
            ids.append(row[0])
            labels.append(lab)
            posts.append(post)
    return PseudoLabeling(
        shape_ids=ids,
        labels=np.asarray(labels, dtype=int),
        posteriors=np.asarray(posts, dtype=np.float64),
        cluster_to_class=None,
    )

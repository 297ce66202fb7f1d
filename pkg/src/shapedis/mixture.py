"""Diagonal Gaussian mixture model over latent code vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InputError

VAR_FLOOR = 1e-6


@dataclass
class MixtureModel:
    """A fitted (or snapshot) diagonal-covariance Gaussian mixture.

    Weights may contain exact zeros; a zero-weight component is simply
    excluded from the likelihood rather than producing -inf everywhere.
    """

    weights: np.ndarray    # (M,), sums to 1
    means: np.ndarray      # (M, d)
    variances: np.ndarray  # (M, d), strictly positive

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.weights.ndim != 1:
            raise InputError("weights: expected 1-D array")
        m = self.weights.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != m:
            raise InputError("means: expected (n_components, dim) array")
        if self.variances.shape != self.means.shape:
            raise InputError("variances: shape must match means")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise InputError("weights: must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise InputError("variances: must be strictly positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_log_prob(self, x: np.ndarray) -> np.ndarray:
        """Per-component log densities, shape (n, M)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InputError(f"points: expected (n, {self.dim}) array, got {x.shape}")
        # log N(x | mu, diag var) = -0.5 * [d log 2pi + sum(log var) + sum((x-mu)^2/var)]
        diff = x[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        logdet = np.sum(np.log(self.variances), axis=1)
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + logdet[None, :] + quad)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """log p(x) under the mixture, shape (n,)."""
        comp = self._component_log_prob(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(comp + logw[None, :], axis=1)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior component probabilities, shape (n, M)."""
        comp = self._component_log_prob(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        joint = comp + logw[None, :]
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def mean_nll(self, x: np.ndarray) -> float:
        """Average negative log-likelihood over points."""
        return float(-np.mean(self.log_prob(x)))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            variances=np.asarray(d["variances"], dtype=np.float64),
        )

"""Loss terms for SDF auto-decoding: clamped reconstruction, eikonal, mixture prior.

All losses are dtype-generic (float32 in training, float64 in equivalence
tests) and reduce to scalars with batch means.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..errors import InputError
from ..mixture import VAR_FLOOR, MixtureModel
from .decoder import SdfDecoder, spatial_gradient


def clamped_sdf_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    codes: torch.Tensor | None = None,
    clamp_dist: float = 0.1,
    lambda_reg: float = 0.0,
) -> torch.Tensor:
    """L1 between clamped predictions and clamped targets, plus code shrinkage.

    Clamping to [-clamp_dist, clamp_dist] concentrates capacity near the
    surface. The regularizer is lambda_reg * mean_i ||z_i||^2 over the batch
    codes (one row per shape, not per point).
    """
    if pred.shape != target.shape:
        raise InputError(f"pred/target shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if clamp_dist <= 0:
        raise InputError("clamp_dist: must be positive")
    loss = torch.mean(
        torch.abs(torch.clamp(pred, -clamp_dist, clamp_dist) - torch.clamp(target, -clamp_dist, clamp_dist))
    )
    if lambda_reg > 0:
        if codes is None:
            raise InputError("codes: required when lambda_reg > 0")
        if codes.ndim != 2:
            raise InputError("codes: expected (batch, d)")
        loss = loss + lambda_reg * torch.mean(torch.sum(codes**2, dim=1))
    return loss


def eikonal_loss(
    decoder: SdfDecoder,
    points: torch.Tensor,
    codes: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Mean squared deviation of the spatial gradient norm from 1."""
    grad = spatial_gradient(decoder, points, codes, create_graph=create_graph)
    return torch.mean((torch.linalg.norm(grad, dim=1) - 1.0) ** 2)


def eikonal_from_gradients(grad: torch.Tensor) -> torch.Tensor:
    """Same penalty given precomputed gradients (training fuses the forward)."""
    return torch.mean((torch.linalg.norm(grad, dim=1) - 1.0) ** 2)


def mixture_nll(
    codes: torch.Tensor,
    weights: torch.Tensor,
    means: torch.Tensor,
    variances: torch.Tensor,
) -> torch.Tensor:
    """Mean negative log-likelihood of codes under a diagonal Gaussian mixture.

    Zero-weight components are excluded via a -inf log weight, so a
    degenerate mixture with pi = (1, 0) behaves as a single Gaussian.
    """
    if codes.ndim != 2:
        raise InputError("codes: expected (batch, d)")
    m, d = means.shape
    if codes.shape[1] != d or variances.shape != means.shape or weights.shape != (m,):
        raise InputError("mixture parameter shapes inconsistent with codes")
    if bool((variances <= 0).any()):
        raise InputError("variances: must be strictly positive")
    diff = codes.unsqueeze(1) - means.unsqueeze(0)          # (b, m, d)
    quad = torch.sum(diff * diff / variances.unsqueeze(0), dim=2)
    logdet = torch.sum(torch.log(variances), dim=1)
    comp = -0.5 * (d * math.log(2.0 * math.pi) + logdet.unsqueeze(0) + quad)
    neg_inf = torch.tensor(float("-inf"), dtype=codes.dtype, device=codes.device)
    logw = torch.where(weights > 0, torch.log(weights.clamp_min(1e-300)), neg_inf)
    return -torch.mean(torch.logsumexp(comp + logw.unsqueeze(0), dim=1))


def gmm_prior_loss(codes: torch.Tensor, mixture: MixtureModel) -> torch.Tensor:
    """mixture_nll against a fitted/snapshot MixtureModel."""
    kw = dict(dtype=codes.dtype, device=codes.device)
    return mixture_nll(
        codes,
        torch.as_tensor(mixture.weights, **kw),
        torch.as_tensor(mixture.means, **kw),
        torch.as_tensor(mixture.variances, **kw),
    )


class GaussianMixturePrior(nn.Module):
    """Learnable diagonal GMM prior over shape codes.

    Weights go through a softmax and variances through exp, so gradient
    steps cannot leave the valid parameter region; variances are additionally
    floored after each optimizer step (`clamp_variances`).
    """

    def __init__(self, n_components: int, dim: int):
        super().__init__()
        if n_components < 1 or dim < 1:
            raise InputError("GaussianMixturePrior: n_components and dim must be >= 1")
        self.logits = nn.Parameter(torch.zeros(n_components))
        self.means = nn.Parameter(torch.zeros(n_components, dim))
        self.log_vars = nn.Parameter(torch.zeros(n_components, dim))

    def initialize_from_codes(self, codes: torch.Tensor, rng: np.random.Generator) -> None:
        """Means seeded from code rows, spread apart; empirical variances.

        The first mean is a uniform pick; each further mean is drawn with
        probability proportional to squared distance from the chosen set, so
        the components straddle the longest axis of the code cloud instead of
        splitting along sampling noise. Variances start at the per-dimension
        code variance, floored, and weights start uniform.
        """
        n = codes.shape[0]
        k = self.means.shape[0]
        x = codes.detach().double().numpy()
        if n < k:
            idx = rng.choice(n, size=k, replace=True)
        else:
            chosen = [int(rng.integers(n))]
            while len(chosen) < k:
                d2 = np.min(
                    ((x[:, None, :] - x[None, chosen, :]) ** 2).sum(-1), axis=1
                )
                total = d2.sum()
                if total <= 0.0:
                    chosen.append(int(rng.integers(n)))
                    continue
                chosen.append(int(rng.choice(n, p=d2 / total)))
            idx = np.asarray(chosen)
        var = np.maximum(x.var(axis=0), VAR_FLOOR)
        with torch.no_grad():
            self.means.copy_(codes[torch.as_tensor(idx)].detach())
            self.log_vars.copy_(
                torch.log(torch.as_tensor(var, dtype=self.log_vars.dtype))
                .expand_as(self.log_vars)
            )
            self.logits.zero_()

    def load_mixture(self, mixture: MixtureModel) -> None:
        """Adopt a fitted mixture's parameters (inverse of `snapshot`)."""
        if mixture.n_components != self.means.shape[0] or mixture.dim != self.means.shape[1]:
            raise InputError("load_mixture: component count or dimension mismatch")
        weights = np.clip(np.asarray(mixture.weights, dtype=np.float64), 1e-12, None)
        var = np.maximum(np.asarray(mixture.variances, dtype=np.float64), VAR_FLOOR)
        with torch.no_grad():
            self.logits.copy_(torch.log(torch.as_tensor(weights, dtype=self.logits.dtype)))
            self.means.copy_(torch.as_tensor(mixture.means, dtype=self.means.dtype))
            self.log_vars.copy_(torch.log(torch.as_tensor(var, dtype=self.log_vars.dtype)))

    def nll(self, codes: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(self.logits.to(codes.dtype), dim=0)
        return mixture_nll(
            codes, weights, self.means.to(codes.dtype), torch.exp(self.log_vars).to(codes.dtype)
        )

    def clamp_variances(self) -> bool:
        """Floor variances at VAR_FLOOR; returns True if anything clamped."""
        floor = math.log(VAR_FLOOR)
        with torch.no_grad():
            below = self.log_vars < floor
            if bool(below.any()):
                self.log_vars.clamp_(min=floor)
                return True
        return False

    def snapshot(self) -> MixtureModel:
        with torch.no_grad():
            return MixtureModel(
                weights=torch.softmax(self.logits, dim=0).double().numpy(),
                means=self.means.double().numpy().copy(),
                variances=torch.exp(self.log_vars).double().numpy().copy(),
            )

"""Disentanglement objective terms for the latent VAE.

The designated-coordinate losses (soft-nearest-neighbour pull and the
spread/sensitivity penalty) are what bind one latent dimension to one
covariate; the covariance penalty keeps the remaining dimensions from
leaking into each other; the SDF passthrough keeps reconstructed codes
renderable by the frozen stage-1 decoder.
"""

from __future__ import annotations

import math

import torch

from ..errors import FrozenRendererError, InputError
from ..stage1.decoder import SdfDecoder
from ..stage1.losses import clamped_sdf_loss


def code_recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch and code dimensions."""
    if pred.shape != target.shape:
        raise InputError(f"pred/target shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def kl_loss(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over dimensions, averaged over the batch."""
    if mean.shape != logvar.shape or mean.ndim != 2:
        raise InputError("mean/logvar: expected matching (b, k) tensors")
    per_sample = 0.5 * torch.sum(mean**2 + torch.exp(logvar) - 1.0 - logvar, dim=1)
    return torch.mean(per_sample)


def covariance_offdiag_loss(z: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of the off-diagonal unbiased batch covariance."""
    if z.ndim != 2:
        raise InputError("z: expected (b, k)")
    b = z.shape[0]
    if b < 2:
        raise InputError("z: need at least 2 samples for a covariance")
    centered = z - z.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / (b - 1)
    off = cov - torch.diag(torch.diag(cov))
    return torch.sum(off**2)


def adaptive_temperature(
    z: torch.Tensor, coord: int, lo: float = 1e-3, hi: float = 10.0
) -> float:
    """Median pairwise squared distance in one coordinate, clipped to [lo, hi].

    Returned as a plain float: the temperature is a stop-gradient statistic.
    """
    if z.ndim != 2 or not (0 <= coord < z.shape[1]):
        raise InputError("z/coord: expected (b, k) with a valid coordinate index")
    if z.shape[0] < 2:
        raise InputError("z: need at least 2 samples for a pairwise median")
    vals = z[:, coord].detach()
    diff = vals.unsqueeze(0) - vals.unsqueeze(1)
    iu = torch.triu_indices(len(vals), len(vals), offset=1)
    pair = (diff[iu[0], iu[1]]) ** 2
    return float(torch.clamp(pair.median(), lo, hi))


def snnl_loss(
    z: torch.Tensor,
    labels: torch.Tensor,
    labeled_mask: torch.Tensor,
    coord: int,
    temperature: float,
    threshold: float,
    lam1: float = 0.5,
    lam2: float = 0.5,
) -> torch.Tensor:
    """Soft-nearest-neighbour pull on one designated coordinate.

    For each labeled anchor i, positives are other labeled samples whose
    label is within ``threshold``. The numerator gathers affinities in the
    designated coordinate; the denominator mixes affinities to all labeled
    samples in that coordinate (weight lam1) with positives' affinities in
    the remaining coordinates (weight lam2), which pushes same-label
    structure out of the non-designated dimensions. Unlabeled samples are
    excluded everywhere. Anchors without positives contribute zero but stay
    in the mean. Computed in log space for stability.
    """
    if z.ndim != 2 or z.shape[1] < 2:
        raise InputError("z: expected (b, k) with k >= 2")
    if not (0 <= coord < z.shape[1]):
        raise InputError(f"coord: out of range for k={z.shape[1]}")
    if temperature <= 0:
        raise InputError("temperature: must be positive")
    if threshold < 0:
        raise InputError("threshold: must be non-negative")
    if lam1 < 0 or lam2 < 0 or lam1 + lam2 == 0:
        raise InputError("lam1/lam2: non-negative with a positive sum")
    if labels.shape != (z.shape[0],) or labeled_mask.shape != (z.shape[0],):
        raise InputError("labels/labeled_mask: expected (b,)")

    idx = torch.nonzero(labeled_mask, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return z.sum() * 0.0
    zl = z[idx]
    yl = labels[idx]
    bl, k = zl.shape

    diff = zl.unsqueeze(1) - zl.unsqueeze(0)      # (bl, bl, k)
    sq = diff**2
    d_c = sq[..., coord]
    d_rest = (sq.sum(dim=2) - d_c) / (k - 1)
    log_ac = -d_c / temperature
    log_anc = -d_rest / temperature

    neg_inf = torch.tensor(float("-inf"), dtype=z.dtype, device=z.device)
    offdiag = ~torch.eye(bl, dtype=torch.bool, device=z.device)
    pos = (torch.abs(yl.unsqueeze(0) - yl.unsqueeze(1)) <= threshold) & offdiag

    # anchors without positives contribute exactly zero; drop their rows
    # before any logsumexp so no all(-inf) reduction enters the graph
    rows = pos.any(dim=1)
    if not bool(rows.any()):
        return z.sum() * 0.0
    log_num = torch.logsumexp(torch.where(pos[rows], log_ac[rows], neg_inf), dim=1)
    den_parts = []
    if lam1 > 0:
        den_parts.append(math.log(lam1) + torch.where(offdiag[rows], log_ac[rows], neg_inf))
    if lam2 > 0:
        den_parts.append(math.log(lam2) + torch.where(pos[rows], log_anc[rows], neg_inf))
    log_den = torch.logsumexp(torch.cat(den_parts, dim=1), dim=1)
    return (log_den - log_num).sum() / bl


def dis_sen_loss(
    z: torch.Tensor,
    decoder,
    coord: int,
    epsilon: float = 0.02,
    eta: float = 0.02,
) -> torch.Tensor:
    """Spread matching plus a minimum-sensitivity hinge for one coordinate.

    The first term pulls the designated coordinate's batch standard
    deviation toward the mean of the others; the second term penalizes the
    decoder for ignoring the coordinate: alpha is the mean output change
    under a +-epsilon probe, and falling below eta is penalized
    quadratically (normalized by eta).
    """
    if z.ndim != 2 or z.shape[1] < 2:
        raise InputError("z: expected (b, k) with k >= 2")
    if z.shape[0] < 2:
        raise InputError("z: need at least 2 samples for batch statistics")
    if not (0 <= coord < z.shape[1]):
        raise InputError(f"coord: out of range for k={z.shape[1]}")
    if epsilon <= 0 or eta <= 0:
        raise InputError("epsilon and eta must be positive")
    s = z.std(dim=0, unbiased=True)
    s_c = s[coord]
    others = torch.cat([s[:coord], s[coord + 1 :]])
    spread = (s_c - others.mean()) ** 2

    probe = torch.zeros_like(z)
    probe[:, coord] = epsilon
    delta = decoder(z + probe) - decoder(z - probe)
    alpha = torch.linalg.norm(delta, dim=1).mean()
    hinge = (torch.clamp(eta - alpha, min=0.0) / eta) ** 2
    return spread + hinge


def _assert_frozen(renderer: SdfDecoder) -> None:
    if any(p.requires_grad for p in renderer.parameters()):
        raise FrozenRendererError(
            "stage-1 decoder must be frozen (requires_grad=False on all parameters) "
            "before it is used as a renderer in stage-2 training"
        )


def sdf_passthrough_loss(
    renderer: SdfDecoder,
    codes_hat: torch.Tensor,
    points: torch.Tensor,
    targets: torch.Tensor,
    clamp_dist: float = 0.1,
) -> torch.Tensor:
    """Clamped L1 of the frozen renderer driven by reconstructed codes.

    codes_hat (s, d) feeds gradient back into the VAE; points (s, p, 3) and
    targets (s, p) come from the stored per-shape SDF samples.
    """
    _assert_frozen(renderer)
    if codes_hat.ndim != 2 or points.ndim != 3 or targets.ndim != 2:
        raise InputError("codes_hat (s,d), points (s,p,3), targets (s,p) expected")
    s, p, _ = points.shape
    if codes_hat.shape[0] != s or targets.shape != (s, p):
        raise InputError("sdf passthrough inputs misaligned")
    flat_pts = points.reshape(s * p, 3)
    flat_codes = codes_hat.repeat_interleave(p, dim=0)
    pred = renderer(flat_pts, flat_codes)
    return clamped_sdf_loss(pred, targets.reshape(-1), clamp_dist=clamp_dist)


def renderer_eikonal_loss(
    renderer: SdfDecoder,
    codes_hat: torch.Tensor,
    points: torch.Tensor,
) -> torch.Tensor:
    """Optional gradient-norm regularity of the renderer at reconstructed codes."""
    _assert_frozen(renderer)
    s, p, _ = points.shape
    flat_pts = points.reshape(s * p, 3).detach().requires_grad_(True)
    flat_codes = codes_hat.repeat_interleave(p, dim=0)
    pred = renderer(flat_pts, flat_codes)
    (grad,) = torch.autograd.grad(pred.sum(), flat_pts, create_graph=True)
    return torch.mean((torch.linalg.norm(grad, dim=1) - 1.0) ** 2)

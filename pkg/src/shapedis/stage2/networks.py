"""Latent VAE over shape codes: residual MLP encoder/decoder pair."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import InputError

LOGVAR_CLAMP = 10.0


class ResidualBlock(nn.Module):
    """Pre-norm residual MLP block: x + W2 gelu(W1 LN(x))."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(self.act(self.fc1(self.norm(x))))


def _stage(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.GELU(), ResidualBlock(out_dim))


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over the compact latent space."""

    mean: torch.Tensor    # (b, k)
    logvar: torch.Tensor  # (b, k), clamped to +-LOGVAR_CLAMP

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + torch.exp(0.5 * self.logvar) * eps

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


class CodeEncoder(nn.Module):
    """Shape code (d) -> posterior over compact latent (k)."""

    def __init__(
        self,
        code_dim: int = 64,
        latent_dim: int = 8,
        widths: tuple[int, ...] = (256, 128),
    ):
        super().__init__()
        if latent_dim < 1 or code_dim < 1 or not widths:
            raise InputError("CodeEncoder: dims and widths must be positive/non-empty")
        self.code_dim = code_dim
        self.latent_dim = latent_dim
        stages = []
        prev = code_dim
        for w in widths:
            stages.append(_stage(prev, w))
            prev = w
        self.body = nn.Sequential(*stages)
        self.mean_head = nn.Linear(prev, latent_dim)
        self.logvar_head = nn.Linear(prev, latent_dim)

    def forward(self, codes: torch.Tensor) -> LatentPosterior:
        if codes.ndim != 2 or codes.shape[1] != self.code_dim:
            raise InputError(f"codes: expected (b, {self.code_dim}), got {tuple(codes.shape)}")
        h = self.body(codes)
        mean = self.mean_head(h)
        logvar = torch.clamp(self.logvar_head(h), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return LatentPosterior(mean=mean, logvar=logvar)


class CodeDecoder(nn.Module):
    """Compact latent (k) -> reconstructed shape code (d)."""

    def __init__(
        self,
        latent_dim: int = 8,
        code_dim: int = 64,
        widths: tuple[int, ...] = (128, 256, 256),
    ):
        super().__init__()
        if latent_dim < 1 or code_dim < 1 or not widths:
            raise InputError("CodeDecoder: dims and widths must be positive/non-empty")
        self.code_dim = code_dim
        self.latent_dim = latent_dim
        stages = []
        prev = latent_dim
        for w in widths:
            stages.append(_stage(prev, w))
            prev = w
        self.body = nn.Sequential(*stages)
        self.head = nn.Linear(prev, code_dim)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise InputError(f"latents: expected (b, {self.latent_dim}), got {tuple(latents.shape)}")
        return self.head(self.body(latents))

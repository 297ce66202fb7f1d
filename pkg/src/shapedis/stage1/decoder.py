"""Coordinate MLP decoding (point, shape code) -> signed distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import InputError


class SdfDecoder(nn.Module):
    """MLP over concatenated (code, point) with a mid-network skip.

    The input is re-concatenated halfway through, which keeps deep variants
    conditioned on the raw coordinates. GELU keeps the field smooth so
    spatial gradients are well-defined everywhere (the eikonal term and
    finite-difference checks rely on that).
    """

    def __init__(self, latent_dim: int = 64, hidden_dim: int = 128, num_layers: int = 4):
        super().__init__()
        if latent_dim < 1 or hidden_dim < 1 or num_layers < 2:
            raise InputError("SdfDecoder: latent_dim, hidden_dim >= 1 and num_layers >= 2")
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        in_dim = latent_dim + 3
        self.skip_at = num_layers // 2
        layers = []
        width = in_dim
        for i in range(num_layers):
            out = hidden_dim
            if i == self.skip_at:
                width += in_dim
            layers.append(nn.Linear(width, out))
            width = out
        self.hidden = nn.ModuleList(layers)
        self.head = nn.Linear(hidden_dim, 1)
        self.act = nn.GELU()

    def forward(self, points: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """points (m, 3); codes (d,) shared or (m, d) per-point. Returns (m,)."""
        if points.ndim != 2 or points.shape[1] != 3:
            raise InputError(f"points: expected (m, 3), got {tuple(points.shape)}")
        if codes.ndim == 1:
            if codes.shape[0] != self.latent_dim:
                raise InputError(
                    f"codes: expected dim {self.latent_dim}, got {codes.shape[0]}"
                )
            codes = codes.unsqueeze(0).expand(points.shape[0], -1)
        elif codes.ndim == 2:
            if codes.shape != (points.shape[0], self.latent_dim):
                raise InputError(
                    f"codes: expected ({points.shape[0]}, {self.latent_dim}), got {tuple(codes.shape)}"
                )
        else:
            raise InputError("codes: expected a 1-D or 2-D tensor")
        x0 = torch.cat([codes, points], dim=1)
        h = x0
        for i, layer in enumerate(self.hidden):
            if i == self.skip_at:
                h = torch.cat([h, x0], dim=1)
            h = self.act(layer(h))
        return self.head(h).squeeze(-1)


def spatial_gradient(
    decoder: SdfDecoder,
    points: torch.Tensor,
    codes: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """d(decoder)/d(points), shape (m, 3)."""
    pts = points.detach().requires_grad_(True)
    pred = decoder(pts, codes)
    (grad,) = torch.autograd.grad(pred.sum(), pts, create_graph=create_graph)
    return grad


@dataclass
class CodeTable:
    """Per-shape latent codes with stable ordering and id lookup."""

    shape_ids: list[str]
    codes: np.ndarray  # (N, d) float32

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float32)
        if self.codes.ndim != 2:
            raise InputError("codes: expected a (N, d) array")
        if len(self.shape_ids) != len(self.codes):
            raise InputError("CodeTable: shape_ids and codes lengths differ")
        if len(set(self.shape_ids)) != len(self.shape_ids):
            raise InputError("CodeTable: duplicate shape ids")
        self._index = {sid: i for i, sid in enumerate(self.shape_ids)}

    def __len__(self) -> int:
        return len(self.shape_ids)

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def index_of(self, shape_id: str) -> int:
        try:
            return self._index[shape_id]
        except KeyError:
            raise KeyError(f"shape_id {shape_id!r} not in code table") from None

    def vector(self, shape_id: str) -> np.ndarray:
        return self.codes[self.index_of(shape_id)]

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.codes.copy())

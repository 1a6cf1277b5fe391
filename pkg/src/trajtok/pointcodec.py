"""Continuous waypoint values in and out of the embedding space.

A waypoint enters the decoder as one `<point>` token whose input embedding is
computed from its coordinates (fourier features through a small MLP), and
leaves it as two numbers read off a hidden state by another small MLP. No
digit strings are involved in either direction.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

N_BANDS = 8
POINT_SCALE = 20.0  # meters; half-width of the workspace the features resolve
FEATURE_DIM = 2 * 2 * N_BANDS  # coords x bands x (sin, cos)


def fourier_features(coords: torch.Tensor, n_bands: int = N_BANDS, scale: float = POINT_SCALE) -> torch.Tensor:
    """Map (..., 2) coordinates to (..., 4*n_bands) sin/cos features.

    Band k has frequency 2^k * pi / scale, so the lowest band is injective on
    (-scale, scale]; coordinates beyond +/-scale alias by construction (the
    prompt text carries the unaliased goal).
    """
    if coords.shape[-1] != 2:
        raise ValueError("coords must have a trailing dimension of 2")
    coords = coords.to(torch.float64)
    freqs = (2.0 ** torch.arange(n_bands, dtype=torch.float64)) * math.pi / scale
    angles = coords.unsqueeze(-1) * freqs  # (..., 2, n_bands)
    feats = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return feats.reshape(*coords.shape[:-1], 4 * n_bands)


class PointEncoder(nn.Module):
    """Fourier features -> 2D -> D, giving the `<point>` token its input embedding."""

    def __init__(self, dim: int, n_bands: int = N_BANDS, scale: float = POINT_SCALE):
        super().__init__()
        self.n_bands = n_bands
        self.scale = scale
        self.net = nn.Sequential(
            nn.Linear(4 * n_bands, 2 * dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(2 * dim, dim, dtype=torch.float64),
        )

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.net(fourier_features(coords, self.n_bands, self.scale))


class PointHead(nn.Module):
    """Hidden state -> D -> 2 coordinates, scaled back to meters."""

    def __init__(self, dim: int, scale: float = POINT_SCALE):
        super().__init__()
        self.scale = scale
        self.net = nn.Sequential(
            nn.Linear(dim, dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(dim, 2, dtype=torch.float64),
        )

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.net(hidden) * self.scale

"""Torch building blocks: tanh MLPs, diagonal-Gaussian heads, grid codecs.

All stochastic heads emit (mean, var) with var = softplus(raw) + var_floor,
so variances stay strictly positive even on degenerate fits.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MLP(nn.Module):
    """Fully-connected stack, tanh hidden activations, linear output."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.tanh(x)
        return x


class GaussHead(nn.Module):
    """MLP emitting [mean | raw_var]; var = softplus(raw_var) + floor."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, var_floor: float):
        super().__init__()
        self.net = MLP(in_dim, hidden, 2 * out_dim)
        self.out_dim = out_dim
        self.var_floor = var_floor

    def forward(self, x):
        out = self.net(x)
        mean, raw = out[..., : self.out_dim], out[..., self.out_dim :]
        return mean, F.softplus(raw) + self.var_floor


class GridEncoder(nn.Module):
    """Conv front-end for grid-coded modalities; emits a flat feature vector.

    Input arrives flattened (payload convention); presence bit is appended
    after the conv features.
    """

    def __init__(self, grid: tuple[int, int, int], channels: int, kernel: int,
                 stride: int, feature_dim: int):
        super().__init__()
        c, h, w = grid
        self.grid = grid
        self.conv = nn.Conv2d(c, channels, kernel_size=kernel, stride=stride)
        oh = (h - kernel) // stride + 1
        ow = (w - kernel) // stride + 1
        self.fc = nn.Linear(channels * oh * ow + 1, feature_dim)

    def forward(self, flat_payload, present):
        b = flat_payload.shape[0]
        x = flat_payload.reshape(b, *self.grid)
        feats = torch.tanh(self.conv(x)).reshape(b, -1)
        feats = torch.cat([feats, present.unsqueeze(-1)], dim=-1)
        return torch.tanh(self.fc(feats))


class GridDecoder(nn.Module):
    """Deconv head mirroring GridEncoder; emits flattened (mean, var).

    With a fixed sigma the deconv produces mean channels only.
    """

    def __init__(self, latent_dim: int, grid: tuple[int, int, int], channels: int,
                 kernel: int, stride: int, var_floor: float, sigma: float | None = None):
        super().__init__()
        c, h, w = grid
        self.grid = grid
        self.ih = (h - kernel) // stride + 1
        self.iw = (w - kernel) // stride + 1
        self.channels = channels
        self.sigma = sigma
        out_channels = c if sigma is not None else 2 * c
        self.fc = nn.Linear(latent_dim, channels * self.ih * self.iw)
        self.deconv = nn.ConvTranspose2d(channels, out_channels, kernel_size=kernel, stride=stride)
        self.var_floor = var_floor
        self.out_dim = c * h * w

    def forward(self, z):
        b = z.shape[0]
        x = torch.tanh(self.fc(z)).reshape(b, self.channels, self.ih, self.iw)
        out = self.deconv(x)
        c = self.grid[0]
        mean = out[:, :c].reshape(b, -1)
        if self.sigma is not None:
            return mean, torch.full_like(mean, self.sigma**2)
        var = F.softplus(out[:, c:]).reshape(b, -1) + self.var_floor
        return mean, var


def gaussian_logprob(x, mean, var):
    """Sum over the last axis of log N(x; mean, var)."""
    return -0.5 * (((x - mean) ** 2) / var + torch.log(var) + math.log(2 * math.pi)).sum(-1)


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    """KL between diagonal Gaussians, summed over the last axis."""
    return 0.5 * (
        torch.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0
    ).sum(-1)

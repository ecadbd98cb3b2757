"""Keypoint bottleneck: spatial soft-argmax, Gaussian rendering and feature transport.

Keypoint coordinates are ``(row, col)`` pairs in ``[-1, 1]``, with ``-1`` at the
centre of the first pixel and ``+1`` at the centre of the last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


def coordinate_grid(size: int, *, dtype=torch.float32, device=None) -> Tensor:
    return torch.linspace(-1.0, 1.0, size, dtype=dtype, device=device)


def spatial_softmax(raw: Tensor) -> Tensor:
    """Per-channel softmax over all pixels of a ``(B, K, H, W)`` map."""
    b, k, h, w = raw.shape
    return F.softmax(raw.reshape(b, k, h * w), dim=-1).reshape(b, k, h, w)


def soft_argmax(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Expected ``(row, col)`` under the spatial softmax of each channel.

    Returns ``(coords, confidence)`` with ``coords`` of shape ``(B, K, 2)`` and
    ``confidence`` the peak softmax probability per channel.
    """
    prob = spatial_softmax(raw)
    h, w = raw.shape[-2:]
    rows = coordinate_grid(h, dtype=raw.dtype, device=raw.device)
    cols = coordinate_grid(w, dtype=raw.dtype, device=raw.device)
    mu_r = (prob.sum(dim=-1) * rows).sum(dim=-1)
    mu_c = (prob.sum(dim=-2) * cols).sum(dim=-1)
    return torch.stack([mu_r, mu_c], dim=-1), prob.flatten(-2).amax(-1)


def render_gaussians(coords: Tensor, size: tuple[int, int], sigma: float) -> Tensor:
    """Isotropic Gaussian maps with peak 1 at each keypoint, ``(B, K, H, W)``."""
    h, w = size
    rows = coordinate_grid(h, dtype=coords.dtype, device=coords.device)
    cols = coordinate_grid(w, dtype=coords.dtype, device=coords.device)
    dr = (rows[None, None, :] - coords[..., 0:1]) ** 2
    dc = (cols[None, None, :] - coords[..., 1:2]) ** 2
    return torch.exp(-(dr[..., :, None] + dc[..., None, :]) / (2.0 * sigma**2))


def combine_heatmaps(heatmaps: Tensor) -> Tensor:
    """Union of per-keypoint maps, ``1 - prod_k (1 - H_k)``, as ``(B, 1, H, W)``."""
    heatmaps = heatmaps.clamp(0.0, 1.0)
    return (1.0 - torch.prod(1.0 - heatmaps, dim=1, keepdim=True)).clamp(0.0, 1.0)


def transport(psi_s: Tensor, psi_t: Tensor, h_s: Tensor, h_t: Tensor) -> Tensor:
    """Erase source features at both keypoint sets and paste target features.

    ``h_s`` and ``h_t`` are per-keypoint maps ``(B, K, H, W)``; they are merged
    with :func:`combine_heatmaps` first.
    """
    if psi_s.shape != psi_t.shape:
        raise ValueError(f"feature maps differ: {tuple(psi_s.shape)} vs {tuple(psi_t.shape)}")
    if h_s.shape[-2:] != psi_s.shape[-2:] or h_t.shape[-2:] != psi_s.shape[-2:]:
        raise ValueError("heatmap and feature resolutions differ")
    hs = combine_heatmaps(h_s)
    ht = combine_heatmaps(h_t)
    return (1.0 - hs) * (1.0 - ht) * psi_s + ht * psi_t


def reconstruction_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return torch.mean((pred - target) ** 2)


@dataclass(frozen=True)
class KeypointSet:
    """Keypoints of one frame in normalised coordinates plus softmax confidence."""

    coords: np.ndarray
    source_resolution: tuple[int, int]
    confidence: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"expected (K, 2) coordinates, got {coords.shape}")
        if np.any(np.abs(coords) > 1.0 + 1e-9):
            raise ValueError("normalised coordinates must lie in [-1, 1]")
        object.__setattr__(self, "coords", np.clip(coords, -1.0, 1.0))

    def __len__(self) -> int:
        return len(self.coords)

    def to_pixels(self) -> np.ndarray:
        return normalized_to_pixels(self.coords, self.source_resolution)


def normalized_to_pixels(coords, resolution: tuple[int, int]) -> np.ndarray:
    """Map ``[-1, 1]`` coordinates to pixel indices of a ``resolution`` frame."""
    coords = np.asarray(coords, dtype=np.float64)
    scale = (np.asarray(resolution, dtype=np.float64) - 1.0) / 2.0
    return (coords + 1.0) * scale

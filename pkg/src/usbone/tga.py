"""Depth-dependent attenuation mask that suppresses bright near-field echoes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .usgrid import as_frame


@dataclass(frozen=True)
class TgaConfig:
    attenuation_a: float = 0.01

    def __post_init__(self):
        a = self.attenuation_a
        if not (isinstance(a, (int, float)) and math.isfinite(a) and a > 0):
            raise ValueError(f"attenuation_a must be finite and > 0, got {a!r}")


def tga_mask(height: int, cfg: TgaConfig = TgaConfig()) -> np.ndarray:
    """Return the per-row gain ``1 - exp(-a d) / max_d exp(-a d)``.

    Depth ``d`` runs over pixel rows ``0 .. height-1``; the maximum of the
    decay over a column is reached at ``d = 0``, so row 0 gets gain 0 and the
    gain rises monotonically towards 1 with depth.
    """
    if height < 1:
        raise ValueError("height must be >= 1")
    decay = np.exp(-cfg.attenuation_a * np.arange(height, dtype=np.float64))
    return 1.0 - decay / decay.max()


def apply_tga(frame, cfg: TgaConfig = TgaConfig()) -> np.ndarray:
    frame = as_frame(frame)
    return tga_mask(frame.shape[0], cfg)[:, None] * frame

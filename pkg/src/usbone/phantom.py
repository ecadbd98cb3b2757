"""Synthetic ultrasound sweeps with known bone geometry.

Each frame is a unit-mean speckle field modulating a soft-tissue level, a
bright Gaussian ridge along the bone surface, an acoustic shadow below it and a
bright reverberation band near the transducer. The bone drifts vertically over
the sweep following a sinusoid. Geometry is in pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .usgrid import RectROI, VideoSequence


@dataclass(frozen=True)
class Fracture:
    column: int
    gap_width: int = 6
    step: float = 0.0

    def __post_init__(self):
        if self.gap_width < 1:
            raise ValueError("fracture gap_width must be >= 1")


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    frames: int = 256
    bone_depth: float = 100.0
    bone_curvature: float = 0.0
    bone_brightness: float = 0.9
    shadow_attenuation: float = 0.2
    speckle_grain: float = 0.75
    drift_amplitude: float = 6.0
    fracture: Fracture | None = None
    seed: int = 0
    tissue_level: float = 0.2
    near_field_level: float = 0.6
    ridge_sigma: float = 2.0
    speckle_persistence: float = 0.9

    def __post_init__(self):
        if isinstance(self.fracture, dict):
            object.__setattr__(self, "fracture", Fracture(**self.fracture))
        if self.size < 8 or self.frames < 2:
            raise ValueError("phantom needs size >= 8 and frames >= 2")
        if not 0 <= self.bone_brightness <= 1:
            raise ValueError("bone_brightness must lie in [0, 1]")
        if not 0 <= self.shadow_attenuation < 1:
            raise ValueError("shadow_attenuation must lie in [0, 1)")
        if self.speckle_grain <= 0 or self.ridge_sigma <= 0:
            raise ValueError("speckle_grain and ridge_sigma must be positive")
        if not 0 <= self.speckle_persistence <= 1:
            raise ValueError("speckle_persistence must lie in [0, 1]")
        step = self.fracture.step if self.fracture else 0.0
        shallowest = self.bone_depth - abs(self.drift_amplitude) + min(step, 0.0)
        deepest = (self.bone_depth + max(self.bone_curvature, 0.0) + abs(self.drift_amplitude)
                   + max(step, 0.0) + 3 * self.ridge_sigma)
        if shallowest - 3 * self.ridge_sigma < 0 or deepest >= self.size:
            raise ValueError(
                f"bone geometry spans rows {shallowest:.1f}..{deepest:.1f}, outside a {self.size}-row frame"
            )
        if self.fracture is not None and not 0 <= self.fracture.column < self.size:
            raise ValueError("fracture column outside the frame")

    @classmethod
    def scaled(cls, size: int, **overrides) -> "PhantomConfig":
        """Defaults rescaled from the 256-pixel geometry to ``size`` pixels."""
        base = cls()
        k = size / base.size
        kw = dict(
            size=size,
            bone_depth=base.bone_depth * k,
            drift_amplitude=base.drift_amplitude * k,
            ridge_sigma=max(base.ridge_sigma * k, 1.0),
            speckle_grain=max(base.speckle_grain * k, 0.75),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PhantomTruth:
    """Per-frame bone surface depth for every column (NaN inside a fracture gap)."""

    curves: np.ndarray
    ridge_sigma: float
    fracture: Fracture | None = None
    size: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "size", self.curves.shape[1])

    @property
    def ridge_half_width(self) -> int:
        return math.ceil(2 * self.ridge_sigma)

    def bone_mask(self, frame_index: int) -> np.ndarray:
        depth = self.curves[frame_index]
        rows = np.arange(self.size)[:, None]
        with np.errstate(invalid="ignore"):
            return np.abs(rows - depth[None, :]) <= self.ridge_half_width

    def to_dict(self, margin: int = 10) -> dict:
        curves = [[None if np.isnan(d) else round(float(d), 4) for d in row] for row in self.curves]
        return {
            "size": self.size,
            "frames": len(self.curves),
            "ridge_sigma": self.ridge_sigma,
            "fracture": asdict(self.fracture) if self.fracture else None,
            "margin": margin,
            "curves": curves,
            "rois": [truth_roi(self, i, margin).as_list() for i in range(len(self.curves))],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomTruth":
        curves = np.array([[np.nan if d is None else d for d in row] for row in doc["curves"]], dtype=np.float64)
        frac = doc.get("fracture")
        return cls(curves, float(doc["ridge_sigma"]), Fracture(**frac) if frac else None)


def bone_curve(cfg: PhantomConfig, frame_index: int) -> np.ndarray:
    cols = np.arange(cfg.size, dtype=np.float64)
    centre = (cfg.size - 1) / 2.0
    depth = cfg.bone_depth + cfg.bone_curvature * ((cols - centre) / centre) ** 2
    depth = depth + cfg.drift_amplitude * math.sin(2.0 * math.pi * frame_index / cfg.frames)
    if cfg.fracture is not None:
        f = cfg.fracture
        depth = np.where(cols > f.column, depth + f.step, depth)
        depth[np.abs(cols - f.column) <= f.gap_width // 2] = np.nan
    return depth


def _complex_field(rng: np.random.Generator, size: int, grain: float) -> np.ndarray:
    re = gaussian_filter(rng.standard_normal((size, size)), grain, mode="wrap")
    im = gaussian_filter(rng.standard_normal((size, size)), grain, mode="wrap")
    return re + 1j * im


def generate(cfg: PhantomConfig = PhantomConfig()) -> tuple[VideoSequence, PhantomTruth]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    rows = np.arange(n, dtype=np.float64)[:, None]
    band = 0.1 * n
    near = np.where(rows < band, 0.5 * (1.0 + np.cos(np.pi * rows / band)), 0.0)

    base = _complex_field(rng, n, cfg.speckle_grain)
    rho = cfg.speckle_persistence
    frames = np.empty((cfg.frames, n, n))
    curves = np.empty((cfg.frames, n))
    for t in range(cfg.frames):
        fresh = _complex_field(rng, n, cfg.speckle_grain)
        envelope = np.abs(math.sqrt(rho) * base + math.sqrt(1.0 - rho) * fresh)
        speckle = envelope / envelope.mean()

        depth = bone_curve(cfg, t)
        curves[t] = depth
        has_bone = ~np.isnan(depth)
        d = np.where(has_bone, depth, np.inf)[None, :]

        img = cfg.tissue_level * speckle
        img = np.where(rows > d, img * cfg.shadow_attenuation, img)
        with np.errstate(invalid="ignore"):
            ridge = np.exp(-((rows - d) ** 2) / (2.0 * cfg.ridge_sigma**2))
        ridge = np.where(has_bone[None, :], ridge, 0.0)
        img = img + cfg.bone_brightness * ridge * (0.85 + 0.15 * speckle)
        img = img + cfg.near_field_level * near * speckle
        frames[t] = np.clip(img, 0.0, 1.0)
    return VideoSequence(frames), PhantomTruth(curves, cfg.ridge_sigma, cfg.fracture)


def truth_roi(truth: PhantomTruth, frame_index: int, margin: int = 10) -> RectROI:
    """Tight box around the frame's bone curve, grown by ``margin`` pixels.

    Rows run from the shallowest curve point to the deepest point plus the
    ridge half-width; columns span every column carrying bone.
    """
    if not 0 <= frame_index < len(truth.curves):
        raise IndexError(f"frame_index {frame_index} out of range")
    depth = truth.curves[frame_index]
    cols = np.flatnonzero(~np.isnan(depth))
    n = truth.size
    top = max(math.floor(np.nanmin(depth)) - margin, 0)
    bottom = min(math.ceil(np.nanmax(depth)) + truth.ridge_half_width + margin, n - 1)
    left = max(int(cols[0]) - margin, 0)
    right = min(int(cols[-1]) + margin, n - 1)
    return RectROI(top, left, bottom, right)


def with_seed(cfg: PhantomConfig, seed: int) -> PhantomConfig:
    return replace(cfg, seed=seed)

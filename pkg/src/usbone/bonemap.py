"""Multi-scale local-phase bone probability maps.

Pipeline for one wavelength ``lambda0``::

    frame --log-Gabor--> I_bp --derivatives--> (T_even, T_odd)
          --> LPT --Riesz--> (m1, m2, m3) --> LP, FS
    T = LP * FS * (1 - IBS)

All FFTs run on a copy padded (replicate mode) up to the next power of two per
axis and are cropped back afterwards.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.fft

from .tga import TgaConfig, apply_tga
from .usgrid import ScaleStack, as_frame


@dataclass(frozen=True)
class GaborConfig:
    lambda0: float
    sigma0: float = 0.55

    def __post_init__(self):
        if not self.lambda0 >= 2:
            raise ValueError(f"lambda0 must be >= 2 pixels, got {self.lambda0}")
        if not 0 < self.sigma0 < 1:
            raise ValueError(f"sigma0 must lie in (0, 1), got {self.sigma0}")

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi / self.lambda0


@dataclass(frozen=True)
class BoneMapConfig:
    scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    fs_tau: float = 1e-3
    epsilon: float = 1e-8
    sigma0: float = 0.55
    fs_denominator: str = "amplitude"

    def __post_init__(self):
        if self.fs_denominator not in ("amplitude", "energy"):
            raise ValueError("fs_denominator must be 'amplitude' or 'energy'")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales:
            raise ValueError("at least one scale is required")
        for s in self.scales:
            GaborConfig(s, self.sigma0)
        if self.fs_tau < 0:
            raise ValueError("fs_tau must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    def gabor(self, scale_index: int) -> GaborConfig:
        if not 0 <= scale_index < len(self.scales):
            raise IndexError(f"scale_index {scale_index} out of range for {len(self.scales)} scales")
        return GaborConfig(self.scales[scale_index], self.sigma0)


@dataclass(frozen=True)
class TensorField:
    """Per-pixel 2x2 tensors, arrays of shape ``(H, W, 2, 2)``; axis 0 = depth."""

    t_even: np.ndarray
    t_odd: np.ndarray

    @property
    def even_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.t_even**2, axis=(-2, -1)))

    @property
    def odd_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.t_odd**2, axis=(-2, -1)))


class MonogenicTriple(NamedTuple):
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray


# ---------------------------------------------------------------------------
# spectral helpers

def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _pad_pow2(frame: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    ph, pw = _next_pow2(h), _next_pow2(w)
    if (ph, pw) == (h, w):
        return frame
    return np.pad(frame, ((0, ph - h), (0, pw - w)), mode="edge")


def _radial_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frequency coordinates in radians/pixel in FFT (unshifted) order."""
    u = 2.0 * np.pi * scipy.fft.fftfreq(shape[0])[:, None]
    v = 2.0 * np.pi * scipy.fft.fftfreq(shape[1])[None, :]
    u, v = np.broadcast_arrays(u, v)
    return u, v, np.hypot(u, v)


def log_gabor_gain(omega, cfg: GaborConfig) -> np.ndarray:
    """Radial log-Gabor transfer function; zero at ``omega == 0``."""
    omega = np.asarray(omega, dtype=np.float64)
    out = np.zeros_like(omega)
    nz = omega > 0
    out[nz] = np.exp(-np.log(omega[nz] / cfg.omega0) ** 2 / (2.0 * math.log(cfg.sigma0) ** 2))
    return out


def log_gabor_filter(shape: tuple[int, int], cfg: GaborConfig) -> np.ndarray:
    return log_gabor_gain(_radial_grid(shape)[2], cfg)


def log_gabor_response(frame, cfg: GaborConfig, workers: int | None = None) -> np.ndarray:
    """Band-pass ``frame`` with the isotropic log-Gabor filter ``G``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or min(frame.shape) < 4:
        raise ValueError(f"log_gabor_response needs a frame of at least 4x4, got {frame.shape}")
    h, w = frame.shape
    padded = _pad_pow2(frame)
    spectrum = scipy.fft.fft2(padded, workers=workers)
    spectrum *= log_gabor_filter(padded.shape, cfg)
    return scipy.fft.ifft2(spectrum, workers=workers).real[:h, :w]


def riesz_multipliers(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Frequency responses ``i u/|w|`` and ``i v/|w|`` of the discrete Riesz pair.

    On even-length axes the Nyquist frequency is its own negative, so
    ``i u/|w|`` is not Hermitian there and its output would lose energy after
    taking the real part. Those bins get the same magnitude with a phase that
    restores Hermitian symmetry (sign taken from the other frequency axis,
    purely real where a bin is its own conjugate partner). This keeps
    ``|R1|^2 + |R2|^2 = 1`` at every non-DC bin.
    """
    h, w = shape
    u, v, omega = _radial_grid(shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        ru = np.where(omega > 0, u / omega, 0.0)
        rv = np.where(omega > 0, v / omega, 0.0)
    r1 = 1j * ru
    r2 = 1j * rv
    rows = np.arange(h)
    cols = np.arange(w)
    if h % 2 == 0:
        k = h // 2
        self_paired = (cols == 0) | ((w % 2 == 0) & (cols == w // 2))
        mag = np.abs(ru[k])
        r1[k] = np.where(self_paired, mag, 1j * mag * np.sign(v[k]))
    if w % 2 == 0:
        k = w // 2
        self_paired = (rows == 0) | ((h % 2 == 0) & (rows == h // 2))
        mag = np.abs(rv[:, k])
        r2[:, k] = np.where(self_paired, mag, 1j * mag * np.sign(u[:, k]))
    return r1, r2


def riesz_monogenic(lpt, workers: int | None = None) -> MonogenicTriple:
    """Monogenic triple of ``lpt``: the signal itself and its two Riesz parts.

    ``m2`` responds to variation along depth (rows) and ``m3`` to lateral
    variation (columns).
    """
    lpt = np.asarray(lpt, dtype=np.float64)
    h, w = lpt.shape
    padded = _pad_pow2(lpt)
    spectrum = scipy.fft.fft2(padded, workers=workers)
    r1, r2 = riesz_multipliers(padded.shape)
    m2 = scipy.fft.ifft2(spectrum * r1, workers=workers).real[:h, :w]
    m3 = scipy.fft.ifft2(spectrum * r2, workers=workers).real[:h, :w]
    return MonogenicTriple(lpt.copy(), m2, m3)


# ---------------------------------------------------------------------------
# finite differences (central, replicate boundary)

def _central(a: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    hi = np.take(p, np.arange(2, p.shape[axis]), axis=axis)
    lo = np.take(p, np.arange(0, p.shape[axis] - 2), axis=axis)
    return 0.5 * (hi - lo)


def _second(a: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    n = p.shape[axis]
    hi = np.take(p, np.arange(2, n), axis=axis)
    lo = np.take(p, np.arange(0, n - 2), axis=axis)
    return hi - 2.0 * a + lo


def _laplacian(a: np.ndarray) -> np.ndarray:
    return _second(a, 0) + _second(a, 1)


def hessian(i_bp: np.ndarray) -> np.ndarray:
    """``(H, W, 2, 2)`` Hessian; mixed term symmetric since axis operators commute."""
    i_rr = _second(i_bp, 0)
    i_cc = _second(i_bp, 1)
    i_rc = _central(_central(i_bp, 1), 0)
    return np.stack([np.stack([i_rr, i_rc], -1), np.stack([i_rc, i_cc], -1)], -2)


def derivative_tensors(i_bp) -> TensorField:
    """Even tensor ``H H^T`` and odd tensor ``-0.5 (g q^T + q g^T)``.

    ``g`` is the gradient of the band-passed image and ``q`` the gradient of
    its Laplacian.
    """
    i_bp = np.asarray(i_bp, dtype=np.float64)
    hess = hessian(i_bp)
    t_even = hess @ np.swapaxes(hess, -1, -2)
    lap = _laplacian(i_bp)
    g = np.stack([_central(i_bp, 0), _central(i_bp, 1)], -1)
    q = np.stack([_central(lap, 0), _central(lap, 1)], -1)
    gq = g[..., :, None] * q[..., None, :]
    t_odd = -0.5 * (gq + np.swapaxes(gq, -1, -2))
    return TensorField(t_even, t_odd)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def lpt_image(tf: TensorField, i_bp) -> np.ndarray:
    """Signed local-phase tensor image rescaled to ``[0, 1]``.

    The even part carries the sign of ``-laplacian`` (bright ridges positive),
    the odd part the sign of the depth derivative.
    """
    i_bp = np.asarray(i_bp, dtype=np.float64)
    even = tf.even_norm * np.sign(-_laplacian(i_bp))
    odd = tf.odd_norm * np.sign(_central(i_bp, 0))
    phase = np.arctan2(odd, even)
    return _minmax(np.hypot(even, odd) * np.cos(phase))


def lp_map(m: MonogenicTriple, eps: float = 1e-8) -> np.ndarray:
    odd = np.hypot(m.m2, m.m3)
    lp = 1.0 - np.arctan(odd / (np.abs(m.m1) + eps)) / (np.pi / 2.0)
    return np.clip(lp, 0.0, 1.0)


def fs_map(tf: TensorField, m: MonogenicTriple, tau: float = 1e-3, eps: float = 1e-8,
           i_bp=None, denominator: str = "amplitude") -> np.ndarray:
    """Feature symmetry, rescaled to ``[0, 1]``.

    Tensor norms are divided by their joint peak over the frame before the
    threshold ``tau`` is applied, so ``tau`` is scale free. When ``i_bp`` is
    given the even norm carries the sign of ``-laplacian`` so that dark valleys
    do not register as symmetric features.

    ``denominator="amplitude"`` divides by ``sqrt(m1^2 + m2^2 + m3^2)``, which
    keeps the ratio dimensionless; ``"energy"`` divides by the squared sum.
    """
    even, odd = tf.even_norm, tf.odd_norm
    peak = max(even.max(), odd.max())
    if peak > 0:
        even, odd = even / peak, odd / peak
    if i_bp is not None:
        even = even * np.sign(-_laplacian(np.asarray(i_bp, dtype=np.float64)))
    numer = np.maximum(even - odd - tau, 0.0)
    energy = m.m1**2 + m.m2**2 + m.m3**2
    if denominator == "amplitude":
        energy = np.sqrt(energy)
    elif denominator != "energy":
        raise ValueError(f"unknown denominator {denominator!r}")
    return _minmax(numer / (energy + eps))


def ibs_map(frame) -> np.ndarray:
    """Integrated backscatter per column, normalised by the column total."""
    frame = np.asarray(frame, dtype=np.float64)
    acc = np.cumsum(frame**2, axis=0)
    total = acc[-1]
    out = np.zeros_like(acc)
    nz = total > 0
    out[:, nz] = acc[:, nz] / total[nz]
    return out


def bone_probability_map(frame_tga, cfg: BoneMapConfig = BoneMapConfig(), scale_index: int = 0,
                         workers: int | None = None) -> np.ndarray:
    """``LP * FS * (1 - IBS)`` at wavelength ``cfg.scales[scale_index]``."""
    gabor = cfg.gabor(scale_index)
    frame_tga = as_frame(frame_tga, clip=True)
    i_bp = log_gabor_response(frame_tga, gabor, workers=workers)
    tf = derivative_tensors(i_bp)
    mono = riesz_monogenic(lpt_image(tf, i_bp), workers=workers)
    lp = lp_map(mono, cfg.epsilon)
    fs = fs_map(tf, mono, cfg.fs_tau, cfg.epsilon, i_bp, cfg.fs_denominator)
    return np.clip(lp * fs * (1.0 - ibs_map(frame_tga)), 0.0, 1.0)


def build_scale_stack(frame_tga, cfg: BoneMapConfig = BoneMapConfig(),
                      workers: int | None = None) -> ScaleStack:
    frame_tga = as_frame(frame_tga, clip=True)
    maps = [bone_probability_map(frame_tga, cfg, i, workers) for i in range(len(cfg.scales))]
    return ScaleStack(np.stack([frame_tga, *maps]), cfg.scales)


def stack_sequence(frames: Sequence[np.ndarray], cfg: BoneMapConfig = BoneMapConfig(),
                   tga: TgaConfig | None = TgaConfig(), threads: int = 1) -> np.ndarray:
    """TGA plus scale stacks for many raw frames, as a ``(T, S+1, H, W)`` array.

    Frames are independent, so ``threads > 1`` fans them out; results are
    gathered in input order.
    """
    def one(frame):
        f = apply_tga(frame, tga) if tga is not None else as_frame(frame, clip=True)
        return build_scale_stack(f, cfg).channels

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, frames))
    else:
        out = [one(f) for f in frames]
    return np.stack(out)

"""Frame and sequence data model, coordinate conventions and file I/O.

Frames are plain 2D ``float64`` numpy arrays indexed ``[row, col]`` where the
row index is depth (row 0 touches the transducer face) and the column index is
the lateral position. Values live in ``[0, 1]``.

Two on-disk formats are supported:

* 8-bit grayscale PNG, value ``v`` stored as ``round(v * 255)``.
* ``USF1`` raw float: the magic bytes ``b"USF1"``, height and width as
  little-endian ``uint32``, then ``height * width`` little-endian ``float32``
  values in row-major order.

Videos on disk are directories of ``frame_0000.png``, ``frame_0001.png``, ...
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

USF_MAGIC = b"USF1"
FRAME_PATTERN = "frame_{:04d}.png"


class FrameFormatError(ValueError):
    """Raised for files that decode but do not hold a usable frame."""


def as_frame(data, *, clip: bool = False) -> np.ndarray:
    """Validate ``data`` as a Frame and return it as a float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise FrameFormatError(f"frame must be 2D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FrameFormatError(f"frame has a zero dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FrameFormatError("frame contains non-finite values")
    if clip:
        arr = np.clip(arr, 0.0, 1.0)
    elif arr.min() < 0.0 or arr.max() > 1.0:
        raise FrameFormatError("frame values must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class VideoSequence:
    """Ordered frames of identical size, stored as a ``(T, H, W)`` array."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError(f"expected (T, H, W) frames, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a sequence needs at least 2 frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, index) -> np.ndarray:
        return self.frames[index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class ScaleStack:
    """Network input for one frame.

    ``channels[0]`` is the TGA-compensated frame and ``channels[1:]`` the bone
    probability maps, one per wavelength in ``scales``.
    """

    channels: np.ndarray
    scales: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != len(self.scales) + 1:
            raise ValueError(
                f"channel count {self.channels.shape[0]} does not match "
                f"{len(self.scales)} scales + 1"
            )


@dataclass(frozen=True)
class RectROI:
    """Axis-aligned box in pixel indices; membership is boundary-inclusive."""

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self):
        if not (0 <= self.top < self.bottom and 0 <= self.left < self.right):
            raise ValueError(f"degenerate ROI {self}")

    def validate(self, height: int, width: int) -> "RectROI":
        if self.bottom >= height or self.right >= width:
            raise ValueError(f"ROI {self} exceeds a {height}x{width} frame")
        return self

    def contains(self, row: float, col: float) -> bool:
        return self.top <= row <= self.bottom and self.left <= col <= self.right

    @property
    def area(self) -> int:
        return (self.bottom - self.top + 1) * (self.right - self.left + 1)

    def mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        out[self.top : self.bottom + 1, self.left : self.right + 1] = True
        return out

    def as_list(self) -> list[int]:
        return [self.top, self.left, self.bottom, self.right]


def _read_usf(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FrameFormatError(f"{path}: truncated USF1 header")
    height, width = struct.unpack("<II", raw[4:12])
    if height == 0 or width == 0:
        raise FrameFormatError(f"{path}: zero-dimension image")
    expected = 12 + 4 * height * width
    if len(raw) != expected:
        raise FrameFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width)
    return data.astype(np.float64)


def read_usf(path: str | os.PathLike) -> np.ndarray:
    """Read a ``USF1`` file without clipping or validation of the range."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic != USF_MAGIC:
        raise FrameFormatError(f"{path}: not a USF1 file")
    return _read_usf(path)


def write_usf(frame, path: str | os.PathLike) -> None:
    data = np.asarray(frame, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("USF1 holds a single 2D frame")
    header = USF_MAGIC + struct.pack("<II", *data.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(data).tobytes())


def resize_bilinear(frame: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    height, width = target_size
    if (height, width) == frame.shape:
        return frame.copy()
    if height <= 0 or width <= 0:
        raise ValueError(f"invalid target size {target_size}")
    img = Image.fromarray(frame.astype(np.float32))
    out = img.resize((width, height), resample=Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def load_frame(path: str | os.PathLike, target_size: tuple[int, int] | None = (256, 256)) -> np.ndarray:
    """Load a PNG or USF1 file as a Frame, resized bilinearly to ``target_size``.

    ``target_size`` is ``(height, width)``; ``None`` keeps the native size.
    PNG values are scaled from ``[0, 255]`` to ``[0, 1]``.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == USF_MAGIC:
        data = _read_usf(path)
    else:
        try:
            with Image.open(path) as img:
                img.load()
                if img.width == 0 or img.height == 0:
                    raise FrameFormatError(f"{path}: zero-dimension image")
                # RGB inputs are reduced to 8-bit luminance
                data = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        except (Image.UnidentifiedImageError, SyntaxError) as exc:
            raise FrameFormatError(f"{path}: unrecognised image format") from exc
    data = as_frame(data, clip=True)
    if target_size is not None:
        data = np.clip(resize_bilinear(data, tuple(target_size)), 0.0, 1.0)
    return data


def save_frame(frame, path: str | os.PathLike) -> None:
    """Write ``frame`` as an 8-bit grayscale PNG (``round(v * 255)``)."""
    data = as_frame(frame, clip=True)
    pixels = np.rint(data * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def load_sequence(directory: str | os.PathLike, target_size: tuple[int, int] | None = None,
                  frame_rate: float = 25.0) -> VideoSequence:
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    frames = [load_frame(p, target_size) for p in paths]
    return VideoSequence(np.stack(frames), frame_rate)


def save_sequence(seq: VideoSequence | np.ndarray, directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq)
    paths = []
    for i, frame in enumerate(frames):
        path = directory / FRAME_PATTERN.format(i)
        save_frame(frame, path)
        paths.append(path)
    return paths


def pair_indices(length: int, separation: int, count: int, seed) -> np.ndarray:
    """Start indices ``t`` drawn uniformly from ``[0, length - separation)``.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if count <= 0:
        raise ValueError("count must be positive")
    if length <= separation:
        raise ValueError(f"sequence of length {length} is too short for separation {separation}")
    rng = np.random.default_rng(seed)
    return rng.integers(0, length - separation, size=count)


def frame_pairs(seq: VideoSequence, separation: int, count: int,
                seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample ``count`` frame pairs ``(x_t, x_{t+separation})`` with replacement."""
    starts = pair_indices(len(seq), separation, count, seed)
    return [(seq[t], seq[t + separation]) for t in starts]


def stack_frames(frames: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([as_frame(f) for f in frames])

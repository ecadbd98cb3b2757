"""Keypoint-in-ROI hit rate and overlay rendering."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image

from .transporter.keypoints import KeypointSet
from .usgrid import RectROI, as_frame

# Saturated colours only; grey base pixels always have R == G == B.
PALETTE = np.array(
    [
        (230, 25, 75),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 190),
        (0, 128, 128),
        (170, 110, 40),
    ],
    dtype=np.uint8,
)
ROI_COLOUR = np.array((0, 255, 0), dtype=np.uint8)
KEYPOINT_RADIUS = 3


@dataclass
class EvalReport:
    frames_evaluated: int
    frames_hit: int
    hit_rate: float
    top_n: int = 1
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "frames_evaluated": self.frames_evaluated,
            "frames_hit": self.frames_hit,
            "hit_rate": self.hit_rate,
            "top_n": self.top_n,
            "records": self.records,
        }


def _pixels(kp) -> np.ndarray:
    if isinstance(kp, KeypointSet):
        return kp.to_pixels()
    arr = np.asarray(kp, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (K, 2) keypoints, got shape {arr.shape}")
    return arr


def eval_hit_rate(keypoints: Sequence, rois: Sequence[RectROI], top_n: int = 1,
                  frame_ids: Sequence[int] | None = None) -> EvalReport:
    """Count frames where at least ``top_n`` keypoints fall inside the ROI.

    ``keypoints`` holds one entry per frame, either a :class:`KeypointSet` or a
    ``(K, 2)`` array of ``(row, col)`` pixel coordinates. ROI membership is
    boundary-inclusive.
    """
    if len(keypoints) != len(rois):
        raise ValueError(f"{len(keypoints)} keypoint sets for {len(rois)} ROIs")
    if len(keypoints) == 0:
        raise ValueError("nothing to evaluate")
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    frame_ids = list(range(len(rois))) if frame_ids is None else list(frame_ids)
    records = []
    hits = 0
    for fid, kp, roi in zip(frame_ids, keypoints, rois):
        px = _pixels(kp)
        if top_n > len(px):
            raise ValueError(f"top_n={top_n} exceeds the {len(px)} keypoints of frame {fid}")
        inside = sum(bool(roi.contains(r, c)) for r, c in px)
        hit = inside >= top_n
        hits += hit
        records.append({"frame": int(fid), "keypoints": px.tolist(), "roi": roi.as_list(), "hit": bool(hit)})
    return EvalReport(len(records), hits, hits / len(records), top_n, records)


def overlay_image(frame, keypoints=None, roi: RectROI | None = None) -> np.ndarray:
    """RGB ``uint8`` overlay: grey frame, ROI outline, then keypoint disks."""
    base = np.rint(as_frame(frame, clip=True) * 255.0).astype(np.uint8)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    h, w = base.shape
    if roi is not None:
        t, l = max(roi.top, 0), max(roi.left, 0)
        b, r = min(roi.bottom, h - 1), min(roi.right, w - 1)
        rgb[t, l : r + 1] = ROI_COLOUR
        rgb[b, l : r + 1] = ROI_COLOUR
        rgb[t : b + 1, l] = ROI_COLOUR
        rgb[t : b + 1, r] = ROI_COLOUR
    if keypoints is not None:
        rows, cols = np.mgrid[0:h, 0:w]
        for i, (kr, kc) in enumerate(_pixels(keypoints)):
            cr, cc = int(round(kr)), int(round(kc))
            disk = (rows - cr) ** 2 + (cols - cc) ** 2 <= KEYPOINT_RADIUS**2
            rgb[disk] = PALETTE[i % len(PALETTE)]
    return rgb


def render_overlay(frame, keypoints, roi: RectROI | None, path: str | os.PathLike) -> None:
    Image.fromarray(overlay_image(frame, keypoints, roi)).save(path, format="PNG")

"""Boxes and square crop/uncrop geometry.

Pixel ``i`` covers ``[i, i+1)``; a crop of side ``side`` centred at ``(cx, cy)``
resized to ``out`` pixels maps crop coordinate ``u`` to frame coordinate
``x0 + u * side / out`` with ``x0 = cx - side / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be non-negative, got {self.w}x{self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass(frozen=True)
class CropWindow:
    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        """Frame pixels per crop pixel."""
        return self.side / self.out_size

    @classmethod
    def around(cls, box: BBox, factor: float, out_size: int) -> "CropWindow":
        side = factor * math.sqrt(max(box.w * box.h, 1.0))
        cx, cy = box.center
        return cls(cx - side / 2.0, cy - side / 2.0, side, out_size)

    def to_crop(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x - self.x0) / s, (box.y - self.y0) / s, box.w / s, box.h / s)

    def to_frame(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.x * s + self.x0, box.y * s + self.y0, box.w * s, box.h * s)


def crop(frame: np.ndarray, window: CropWindow) -> np.ndarray:
    """Bilinear resample of a [C,H,W] frame onto the window's grid; outside reads as zero."""
    n = window.out_size
    centers = (np.arange(n) + 0.5) * window.scale - 0.5
    ys = window.y0 + centers
    xs = window.x0 + centers
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((frame.shape[0], n, n), dtype=frame.dtype)
    for c in range(frame.shape[0]):
        out[c] = ndimage.map_coordinates(frame[c], [yy, xx], order=1, mode="constant", cval=0.0)
    return out


def clip_box(box: BBox, width: int, height: int, min_size: float = 2.0) -> BBox:
    """Keep the centre inside the frame and the size within [min_size, frame]."""
    cx, cy = box.center
    cx = min(max(cx, 0.0), float(width))
    cy = min(max(cy, 0.0), float(height))
    w = min(max(box.w, min_size), float(width))
    h = min(max(box.h, min_size), float(height))
    return BBox.from_center(cx, cy, w, h)

"""Axis-aligned bounding boxes in pixel coordinates."""
from __future__ import annotations

import math
from typing import NamedTuple


class DegenerateBoxError(ValueError):
    """Raised when a box has non-positive width or height."""


class BBox(NamedTuple):
    """(x_min, y_min, x_max, y_max) in the pixel frame stated by the caller."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: float, height: float, min_size: float = 1.0) -> "BBox":
        """Clamp to [0, width] x [0, height], keeping at least min_size per side."""
        x0 = min(max(self.x_min, 0.0), width - min_size)
        y0 = min(max(self.y_min, 0.0), height - min_size)
        x1 = max(min(self.x_max, width), x0 + min_size)
        y1 = max(min(self.y_max, height), y0 + min_size)
        return BBox(x0, y0, x1, y1)

    def validate(self) -> "BBox":
        if not all(math.isfinite(v) for v in self):
            raise DegenerateBoxError(f"non-finite box {self}")
        if self.width <= 0 or self.height <= 0:
            raise DegenerateBoxError(f"box has non-positive area: {self}")
        return self


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when either is degenerate."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_distance(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)

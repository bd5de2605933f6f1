"""Axis-aligned boxes, IoU and integer pixel shifts.

Boxes use the COCO ``(x, y, w, h)`` convention with a top-left origin.
Nothing here clips: shifted images are embedded into a larger canvas, so a
shifted box never leaves it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator


@dataclass(frozen=True, slots=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w >= 0 and self.h >= 0):
            raise ValueError(f"box width/height must be non-negative, got {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True, slots=True)
class Shift:
    dx: int
    dy: int

    @property
    def key(self) -> tuple[int, int]:
        """Ordering key: ``(dy, dx)`` lexicographic, so ``(0, 0)`` sorts first."""
        return (self.dy, self.dx)

    def __lt__(self, other: "Shift") -> bool:
        return self.key < other.key

    def as_list(self) -> list[int]:
        return [self.dx, self.dy]


ZERO_SHIFT = Shift(0, 0)


@dataclass(frozen=True, slots=True)
class ShiftGrid:
    """All offsets ``(dx, dy)`` with ``0 <= dx, dy <= max_shift``."""

    max_shift: int

    def __post_init__(self):
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")

    def __len__(self) -> int:
        return (self.max_shift + 1) ** 2

    def __iter__(self) -> Iterator[Shift]:
        # (dy, dx) lexicographic, so (0, 0) comes first.
        m = self.max_shift
        for dy in range(m + 1):
            for dx in range(m + 1):
                yield Shift(dx, dy)

    def __contains__(self, s: object) -> bool:
        return (
            isinstance(s, Shift)
            and 0 <= s.dx <= self.max_shift
            and 0 <= s.dy <= self.max_shift
        )

    @property
    def shifts(self) -> tuple[Shift, ...]:
        return tuple(self)


def intersection(a: Box, b: Box) -> float:
    # (x + w) - x can round above w; clamp so overlap never exceeds either box.
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    if iw <= 0:
        return 0.0
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ih <= 0:
        return 0.0
    return min(iw, a.w, b.w) * min(ih, a.h, b.h)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def crowd_iou(det: Box, crowd: Box) -> float:
    """Overlap against a crowd region, normalised by the detection area only.

    This is how the COCO protocol scores detections against ``iscrowd`` boxes.
    """
    area = det.area
    if area <= 0:
        return 0.0
    return intersection(det, crowd) / area


def apply_shift(b: Box, s: Shift) -> Box:
    return Box(b.x + s.dx, b.y + s.dy, b.w, b.h)


def unapply_shift(b: Box, s: Shift) -> Box:
    return Box(b.x - s.dx, b.y - s.dy, b.w, b.h)

"""Axis-aligned box arithmetic and five-channel input assembly.

Coordinate convention everywhere: boxes are [x1, y1, x2, y2] with the origin
at the top-left corner, y increasing downward, and the upper edges exclusive
for rasterization. All operations here are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle with strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError("box coordinates must be finite")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class ScoredBox:
    """A detection: box, class index, confidence in [0, 1]."""

    box: BBox
    category: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if w > 0 and h > 0 else 0.0


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def union_box(a: BBox, b: BBox, margin: float = 0.0,
              bounds: tuple[float, float] | None = None) -> BBox:
    """Smallest box containing both, grown by margin per side, clamped to
    (width, height) bounds when given."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    x1 = min(a.x1, b.x1) - margin
    y1 = min(a.y1, b.y1) - margin
    x2 = max(a.x2, b.x2) + margin
    y2 = max(a.y2, b.y2) + margin
    if bounds is not None:
        bw, bh = bounds
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, bw), min(y2, bh)
    return BBox(x1, y1, x2, y2)


def pair_margin(a: BBox, b: BBox, min_px: float = 4.0, frac: float = 0.05) -> float:
    """Context margin around a pair's union: max(min_px, frac * larger side)."""
    raw = union_box(a, b)
    return max(min_px, frac * max(raw.width, raw.height))


def nms(candidates: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression over one class.

    Repeatedly keeps the highest-scored remaining box (ties broken by lower
    original index) and discards boxes overlapping it above the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    kept: list[int] = []
    suppressed = [False] * len(candidates)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if not suppressed[j] and j != i \
                    and iou(candidates[i].box, candidates[j].box) > iou_threshold:
                suppressed[j] = True
    kept.sort()
    return [candidates[i] for i in kept]


def rasterize_box(frame: BBox, box: BBox, resolution: int) -> np.ndarray:
    """Binary S x S mask of a box mapped into the frame's coordinate system.

    A mask cell is 1 when its pixel center falls inside the mapped rectangle.
    A box that does not intersect the frame signals an upstream pairing bug
    and raises ValueError.
    """
    if intersection_area(frame, box) == 0.0 and not frame.contains(box):
        raise ValueError("box lies entirely outside the frame")
    sx = resolution / frame.width
    sy = resolution / frame.height
    x1 = (box.x1 - frame.x1) * sx
    x2 = (box.x2 - frame.x1) * sx
    y1 = (box.y1 - frame.y1) * sy
    y2 = (box.y2 - frame.y1) * sy
    centers = np.arange(resolution) + 0.5
    inside_x = (centers >= x1) & (centers < x2)
    inside_y = (centers >= y1) & (centers < y2)
    return (inside_y[:, None] & inside_x[None, :]).astype(np.float64)


def rasterize_dual_masks(frame: BBox, subject: BBox, obj: BBox,
                         resolution: int) -> np.ndarray:
    """2 x S x S masks for subject and object; the two may overlap."""
    return np.stack([rasterize_box(frame, subject, resolution),
                     rasterize_box(frame, obj, resolution)])


def crop_resize(image: np.ndarray, box: BBox, resolution: int) -> np.ndarray:
    """Bilinear resample of the box region of an H x W x 3 image to S x S x 3.

    Sample j of the output row covers box.x1 + (j + 0.5) * box_width / S; the
    half-pixel offset makes a full-image crop at native resolution exact.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    img = image.astype(np.float64)
    xs = box.x1 + (np.arange(resolution) + 0.5) * (box.width / resolution) - 0.5
    ys = box.y1 + (np.arange(resolution) + 0.5) * (box.height / resolution) - 0.5
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    top = img[y0[:, None], x0[None, :]] * (1 - fx) + img[y0[:, None], x1[None, :]] * fx
    bot = img[y1[:, None], x0[None, :]] * (1 - fx) + img[y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def five_channel_input(patch: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Assemble the S x S x 5 classifier input.

    Channels 0-2 are the RGB patch scaled from [0, 255] to [0, 1]; channels
    3 and 4 are the subject and object masks, in that order.
    """
    s = patch.shape[0]
    if patch.shape != (s, s, 3):
        raise ValueError(f"expected S x S x 3 patch, got {patch.shape}")
    if masks.shape != (2, s, s):
        raise ValueError(f"expected 2 x {s} x {s} masks, got {masks.shape}")
    out = np.empty((s, s, 5), dtype=np.float64)
    out[:, :, :3] = patch / 255.0
    out[:, :, 3] = masks[0]
    out[:, :, 4] = masks[1]
    return out

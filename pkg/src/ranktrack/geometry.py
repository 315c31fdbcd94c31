"""Boxes, IoU, head-grid label assignment, and box encode/decode.

The classifier/regressor head predicts one box per grid location
(anchor-free). A location is labelled positive when it falls inside the
ground-truth box shrunk by ``POSITIVE_SHRINK`` about its center,
negative when it falls outside the full box, and ignore in between.
The shrink rule is a stand-in convention (common for anchor-free heads)
and is recorded in run configs for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

POSITIVE_SHRINK = 0.5


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, corners inclusive of x1y1."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box extents: {self}")

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

    def contains(self, px: float, py: float) -> bool:
        return self.x1 <= px <= self.x2 and self.y1 <= py <= self.y2

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled_about_center(self, factor: float) -> "Box":
        cx, cy = self.center
        hw, hh = 0.5 * factor * self.width, 0.5 * factor * self.height
        return Box(cx - hw, cy - hh, cx + hw, cy + hh)

    def clipped(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, x1), width)
        y2 = min(max(self.y2, y1), height)
        return Box(x1, y1, x2, y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has no area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center_distance(a: Box, b: Box) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


@dataclass(frozen=True)
class HeadGrid:
    """Geometry of the prediction grid over the search image.

    Grid location (row, col) sits at search pixel
    (offset_y + stride*row, offset_x + stride*col).
    """

    height: int
    width: int
    stride: float
    offset_x: float
    offset_y: float

    @classmethod
    def centered(cls, search_size: int, height: int, width: int, stride: float) -> "HeadGrid":
        return cls(
            height=height,
            width=width,
            stride=stride,
            offset_x=0.5 * (search_size - (width - 1) * stride),
            offset_y=0.5 * (search_size - (height - 1) * stride),
        )

    def pixel_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-location pixel coordinates, each shaped (height, width)."""
        px = self.offset_x + self.stride * np.arange(self.width)
        py = self.offset_y + self.stride * np.arange(self.height)
        return np.broadcast_to(px, (self.height, self.width)).copy(), \
            np.broadcast_to(py[:, None], (self.height, self.width)).copy()


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class LabelMap:
    """Per-location class in {POSITIVE, NEGATIVE, IGNORE} plus regression targets.

    ``targets`` holds (left, top, right, bottom) pixel distances to the
    ground-truth sides; only rows flagged positive are meaningful.
    """

    cls: np.ndarray       # (H, W) int8
    targets: np.ndarray   # (4, H, W) float64

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.cls == POSITIVE))

    @property
    def n_neg(self) -> int:
        return int(np.sum(self.cls == NEGATIVE))

    def pos_flat(self) -> np.ndarray:
        return np.flatnonzero(self.cls.reshape(-1) == POSITIVE)

    def neg_flat(self) -> np.ndarray:
        return np.flatnonzero(self.cls.reshape(-1) == NEGATIVE)


def assign_labels(grid: HeadGrid, gt: Box, shrink: float = POSITIVE_SHRINK) -> LabelMap:
    """Label grid locations against one ground-truth box.

    Positive inside the shrunk box, negative outside the full box,
    ignore in the ring between. A ground truth that misses the grid
    entirely yields zero positives; callers must handle that.
    """
    px, py = grid.pixel_xy()
    inner = gt.scaled_about_center(shrink)
    in_inner = (px >= inner.x1) & (px <= inner.x2) & (py >= inner.y1) & (py <= inner.y2)
    in_full = (px >= gt.x1) & (px <= gt.x2) & (py >= gt.y1) & (py <= gt.y2)

    cls = np.full((grid.height, grid.width), NEGATIVE, dtype=np.int8)
    cls[in_full] = IGNORE
    cls[in_inner] = POSITIVE

    targets = np.stack([px - gt.x1, py - gt.y1, gt.x2 - px, gt.y2 - py])
    return LabelMap(cls=cls, targets=targets)


def encode(point: tuple[float, float], box: Box) -> tuple[float, float, float, float]:
    """Distances (l, t, r, b) from a point to the box sides."""
    px, py = point
    return (px - box.x1, py - box.y1, box.x2 - px, box.y2 - py)


def decode(point: tuple[float, float], offsets) -> Box:
    """Box from side distances at a point; negative offsets clamp to 0."""
    px, py = point
    l, t, r, b = (max(0.0, float(v)) for v in offsets)
    return Box(px - l, py - t, px + r, py + b)


def iou_tensor(x1: Tensor, y1: Tensor, x2: Tensor, y2: Tensor, gt: Box) -> Tensor:
    """Differentiable IoU of predicted box coordinates against a fixed box.

    Inputs may be scalars or aligned vectors. The gradient is zero on
    the flat region where the prediction misses the ground truth, and
    the value can overshoot 1.0 by a few ulps because the division is
    composed from exp/log.
    """
    iw = nm.relu(nm.sub(nm.minimum(x2, gt.x2), nm.maximum(x1, gt.x1)))
    ih = nm.relu(nm.sub(nm.minimum(y2, gt.y2), nm.maximum(y1, gt.y1)))
    inter = nm.mul(iw, ih)
    pred_area = nm.mul(nm.relu(nm.sub(x2, x1)), nm.relu(nm.sub(y2, y1)))
    union = nm.sub(nm.add(pred_area, gt.area), inter)
    return nm.div(inter, union)


def iou_loss(pred: Tensor, gt: Box) -> Tensor:
    """1 - IoU for a (4,)-shaped [x1, y1, x2, y2] prediction."""
    if pred.data.shape != (4,):
        raise ValueError("iou_loss expects a (4,) coordinate tensor")
    if gt.area <= 0.0:
        raise ValueError("iou_loss requires a ground-truth box with area")
    v = iou_tensor(pred[0], pred[1], pred[2], pred[3], gt)
    return nm.sub(1.0, v)

"""Axis-aligned box geometry: IoU, letterboxing, and anchor offset coding.

All boxes live in normalized center-size coordinates of the padded square
network input. Source-pixel boxes enter and leave through
``LetterboxTransform``, so the rest of the code never sees a second
coordinate convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidInputError

Cell = tuple[int, int, int]  # (scale index, row, col)

# exp() guard for decode; anything this large decodes past the unit square
# and is clamped anyway.
_MAX_LOG_RATIO = 60.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle as (center x, center y, width, height)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise InvalidInputError(f"box fields must be finite, got {self}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidInputError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "Box":
        if x2 <= x1 or y2 <= y1:
            raise InvalidInputError(
                f"corners do not form a box: ({x1}, {y1}, {x2}, {y2})"
            )
        return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint.

    Areas come from the same corner differences as the intersection, so
    identical boxes score exactly 1.0 despite rounding.
    """
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize of a source image into a padded square.

    ``scale`` maps source pixels to target pixels; ``pad_x``/``pad_y`` are the
    leading (left/top) padding in target pixels, with the total padding split
    evenly across both sides of the short edge.
    """

    scale: float
    pad_x: float
    pad_y: float
    target_size: int

    @property
    def content_w(self) -> float:
        return self.target_size - 2 * self.pad_x

    @property
    def content_h(self) -> float:
        return self.target_size - 2 * self.pad_y

    @property
    def src_w(self) -> float:
        return self.content_w / self.scale

    @property
    def src_h(self) -> float:
        return self.content_h / self.scale

    def apply_box(self, box: Box) -> Box:
        """Map a box normalized to the source image into padded coordinates."""
        t = self.target_size
        return Box(
            (box.cx * self.content_w + self.pad_x) / t,
            (box.cy * self.content_h + self.pad_y) / t,
            box.w * self.content_w / t,
            box.h * self.content_h / t,
        )

    def invert_box(self, box: Box) -> Box:
        """Map a box in padded coordinates back to source-normalized ones."""
        t = self.target_size
        return Box(
            (box.cx * t - self.pad_x) / self.content_w,
            (box.cy * t - self.pad_y) / self.content_h,
            box.w * t / self.content_w,
            box.h * t / self.content_h,
        )

    def to_source_pixels(self, box: Box) -> tuple[float, float, float, float]:
        """Corner coordinates in source pixels, clamped to the source image."""
        src = self.invert_box(box)
        x1 = min(max(src.x1 * self.src_w, 0.0), self.src_w)
        y1 = min(max(src.y1 * self.src_h, 0.0), self.src_h)
        x2 = min(max(src.x2 * self.src_w, 0.0), self.src_w)
        y2 = min(max(src.y2 * self.src_h, 0.0), self.src_h)
        return (x1, y1, x2, y2)


def letterbox(src_w: float, src_h: float, target: int) -> LetterboxTransform:
    """Fit a ``src_w`` x ``src_h`` image into a ``target`` square.

    The long edge maps exactly onto the target; the short edge is centered
    with equal padding on both sides.
    """
    if src_w <= 0 or src_h <= 0 or target <= 0:
        raise InvalidInputError(
            f"image dimensions must be positive, got {src_w}x{src_h} -> {target}"
        )
    scale = target / max(src_w, src_h)
    # The long edge maps onto the target exactly; keep its pad at literal zero
    # rather than the rounding dust of target - edge * (target / edge).
    pad_x = 0.0 if src_w >= src_h else (target - src_w * scale) / 2
    pad_y = 0.0 if src_h >= src_w else (target - src_h * scale) / 2
    return LetterboxTransform(scale=scale, pad_x=pad_x, pad_y=pad_y, target_size=target)


@dataclass(frozen=True)
class OffsetTarget:
    """Regression targets for one anchor in sigmoid/log-ratio space."""

    sx: float
    sy: float
    tw: float
    th: float
    cell: Cell
    anchor_index: int


def encode_offsets(
    gt: Box, anchor_wh: tuple[float, float], cell: Cell, grid_size: int,
    anchor_index: int = 0,
) -> OffsetTarget:
    """Express ``gt`` as offsets from an anchor prior at a grid cell.

    The ground-truth center must lie inside the cell; sizes become log
    ratios against the prior so that ``decode_offsets`` is an exact inverse.
    """
    aw, ah = anchor_wh
    if aw <= 0 or ah <= 0:
        raise InvalidInputError(f"anchor dimensions must be positive, got {anchor_wh}")
    if grid_size <= 0:
        raise InvalidInputError(f"grid_size must be positive, got {grid_size}")
    _, row, col = cell
    if math.floor(gt.cx * grid_size) != col or math.floor(gt.cy * grid_size) != row:
        raise InvalidInputError(
            f"box center ({gt.cx}, {gt.cy}) is outside cell (row={row}, col={col}) "
            f"on a {grid_size}-cell grid"
        )
    return OffsetTarget(
        sx=gt.cx * grid_size - col,
        sy=gt.cy * grid_size - row,
        tw=math.log(gt.w / aw),
        th=math.log(gt.h / ah),
        cell=cell,
        anchor_index=anchor_index,
    )


def decode_offsets(
    sx: float, sy: float, tw: float, th: float,
    anchor_wh: tuple[float, float], cell: Cell, grid_size: int,
) -> Box:
    """Recover a box from anchor offsets, clamped to the unit square."""
    if not (0.0 <= sx <= 1.0 and 0.0 <= sy <= 1.0):
        raise InvalidInputError(f"sx/sy must be sigmoid outputs in [0,1], got ({sx}, {sy})")
    if grid_size <= 0:
        raise InvalidInputError(f"grid_size must be positive, got {grid_size}")
    aw, ah = anchor_wh
    if aw <= 0 or ah <= 0:
        raise InvalidInputError(f"anchor dimensions must be positive, got {anchor_wh}")
    _, row, col = cell
    cx = (col + sx) / grid_size
    cy = (row + sy) / grid_size
    w = aw * math.exp(min(tw, _MAX_LOG_RATIO))
    h = ah * math.exp(min(th, _MAX_LOG_RATIO))
    x1 = max(cx - w / 2, 0.0)
    y1 = max(cy - h / 2, 0.0)
    x2 = min(cx + w / 2, 1.0)
    y2 = min(cy + h / 2, 1.0)
    return Box.from_corners(x1, y1, x2, y2)

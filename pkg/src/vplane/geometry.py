"""Lane polylines, fixed-width rasterization, mask IoU and lane matching.

Pixel ``(r, c)`` has its center at image coordinates ``(x=c, y=r)``.
"""
from dataclasses import dataclass
import math
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment


class InvalidLaneError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class Point2D(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidConfigError(f"non-integer dims {self.width}x{self.height}")
        if self.width < 2 or self.height < 2:
            raise InvalidConfigError(f"dims must be at least 2x2, got {self.width}x{self.height}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def shape(self) -> Tuple[int, int]:
        """Array shape ``(height, width)``."""
        return (self.height, self.width)


class Lane:
    """Ordered polyline of at least two points, stored as an ``(N, 2)`` float array of (x, y)."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise InvalidLaneError(f"a lane needs at least 2 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise InvalidLaneError("lane points must be finite")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 1e-9):
            raise InvalidLaneError("consecutive lane points coincide")
        pts.setflags(write=False)
        self.points = pts

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, Lane) and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"Lane({self.points.tolist()!r})"

    def transformed(self, fn) -> "Lane":
        """Apply ``fn`` to the ``(N, 2)`` point array and return a new lane."""
        return Lane(fn(self.points.copy()))


@dataclass(frozen=True)
class MatchConfig:
    line_width: int = 30
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.line_width < 1:
            raise InvalidConfigError(f"line_width must be >= 1, got {self.line_width}")
        if not 0 < self.iou_threshold <= 1:
            raise InvalidConfigError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


class MatchResult(NamedTuple):
    tp: int
    fp: int
    fn: int
    pairs: List[Tuple[int, int]]


def _as_lane(lane) -> Lane:
    return lane if isinstance(lane, Lane) else Lane(lane)


def polyline_sq_distance(points: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Squared distance from each query point ``(xs, ys)`` to the nearest point on the polyline."""
    best = np.full(np.broadcast(xs, ys).shape, np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        t = ((xs - x0) * dx + (ys - y0) * dy) / (dx * dx + dy * dy)
        t = np.clip(t, 0.0, 1.0)
        ex = xs - (x0 + t * dx)
        ey = ys - (y0 + t * dy)
        np.minimum(best, ex * ex + ey * ey, out=best)
    return best


def rasterize_lane(lane, width_px: int, dims: ImageDims) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels whose center lies within ``width_px / 2`` of the lane."""
    lane = _as_lane(lane)
    if width_px < 1:
        raise InvalidConfigError(f"width_px must be >= 1, got {width_px}")
    mask = np.zeros(dims.shape, dtype=bool)
    half = width_px / 2.0
    pts = lane.points
    # only pixels inside the padded bounding box can be set
    c0 = max(int(math.floor(pts[:, 0].min() - half)), 0)
    c1 = min(int(math.ceil(pts[:, 0].max() + half)), dims.width - 1)
    r0 = max(int(math.floor(pts[:, 1].min() - half)), 0)
    r1 = min(int(math.ceil(pts[:, 1].max() + half)), dims.height - 1)
    if c0 > c1 or r0 > r1:
        return mask
    ys, xs = np.mgrid[r0:r1 + 1, c0:c1 + 1].astype(np.float64)
    mask[r0:r1 + 1, c0:c1 + 1] = polyline_sq_distance(pts, xs, ys) <= half * half
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool, copy=False)
    b = b.astype(bool, copy=False)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(preds: Sequence, gts: Sequence, line_width: int, dims: ImageDims) -> np.ndarray:
    pm = [rasterize_lane(p, line_width, dims) for p in preds]
    gm = [rasterize_lane(g, line_width, dims) for g in gts]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            out[i, j] = mask_iou(a, b)
    return out


def match_iou_matrix(ious: np.ndarray, iou_threshold: float) -> List[Tuple[int, int]]:
    """Max-total-IoU one-to-one assignment over entries strictly above the threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return []
    weights = np.where(ious > iou_threshold, ious, 0.0)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if weights[r, c] > 0)


def match_lanes(preds: Sequence, gts: Sequence, cfg: MatchConfig, dims: ImageDims) -> MatchResult:
    ious = iou_matrix(preds, gts, cfg.line_width, dims)
    pairs = match_iou_matrix(ious, cfg.iou_threshold)
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, pairs)

"""Gaussian VP heatmaps, hard-argmax decoding and the normalized VP distance."""
from dataclasses import dataclass
import math
from typing import NamedTuple

import numpy as np

from .geometry import ImageDims, InvalidConfigError, Point2D

NORM_DIST_CAP = 0.1


class NotEncodableError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class HeatmapConfig:
    std: float = 7.0
    stride: int = 4

    def __post_init__(self):
        if not self.std > 0:
            raise InvalidConfigError(f"std must be > 0, got {self.std}")
        if self.stride < 1 or int(self.stride) != self.stride:
            raise InvalidConfigError(f"stride must be an integer >= 1, got {self.stride}")

    def grid_dims(self, image_dims: ImageDims) -> ImageDims:
        return ImageDims(image_dims.width // self.stride, image_dims.height // self.stride)


@dataclass(frozen=True)
class VPAnnotation:
    point: Point2D
    visible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "point", Point2D(float(self.point[0]), float(self.point[1])))

    def inside(self, dims: ImageDims) -> bool:
        x, y = self.point
        return 0 <= x <= dims.width - 1 and 0 <= y <= dims.height - 1


class DecodedVP(NamedTuple):
    point: Point2D
    confidence: float


def peak_cell(point, stride: int, grid: ImageDims):
    """Row/column of the heatmap cell containing an image-space point."""
    c = min(int(math.floor(point[0] / stride)), grid.width - 1)
    r = min(int(math.floor(point[1] / stride)), grid.height - 1)
    return max(r, 0), max(c, 0)


def encode_vp(vp: VPAnnotation, image_dims: ImageDims, cfg: HeatmapConfig = HeatmapConfig()) -> np.ndarray:
    """Render ``vp`` as a ``(H // stride, W // stride)`` Gaussian heatmap whose maximum is exactly 1.

    Cell ``(r, c)`` is centered at image point ``((c + 0.5) * stride, (r + 0.5) * stride)``;
    ``decode_vp`` inverts this mapping, so the round trip is off by at most half a cell.
    """
    if not vp.visible:
        raise NotEncodableError("VP is not visible; mask its loss instead of encoding it")
    if not vp.inside(image_dims):
        raise OutOfBoundsError(f"VP {tuple(vp.point)} outside {image_dims.width}x{image_dims.height}")
    grid = cfg.grid_dims(image_dims)
    cx = vp.point.x / cfg.stride - 0.5
    cy = vp.point.y / cfg.stride - 0.5
    xs = np.arange(grid.width, dtype=np.float64)
    ys = np.arange(grid.height, dtype=np.float64)
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    logits = -d2 / (2.0 * cfg.std ** 2)
    h = np.exp(logits - logits.max())
    r, c = peak_cell(vp.point, cfg.stride, grid)
    h[r, c] = 1.0
    return h


def decode_vp(h, cfg: HeatmapConfig = HeatmapConfig()) -> DecodedVP:
    """Global argmax (first in row-major order) mapped back to image coordinates."""
    h = np.asarray(h, dtype=np.float64)
    h = h.reshape(h.shape[-2:]) if h.ndim > 2 else h
    if h.ndim != 2 or h.size == 0:
        raise ValueError(f"expected a non-empty 2-D heatmap, got shape {h.shape}")
    idx = int(np.argmax(h))
    r, c = divmod(idx, h.shape[1])
    point = Point2D((c + 0.5) * cfg.stride, (r + 0.5) * cfg.stride)
    return DecodedVP(point, float(h[r, c]))


def norm_dist(pred, gt, image_dims: ImageDims) -> float:
    """Euclidean VP error over the image diagonal, capped at 0.1 (a miss)."""
    d = math.hypot(pred[0] - gt[0], pred[1] - gt[1]) / image_dims.diagonal
    if not math.isfinite(d):
        raise ValueError("VP coordinates must be finite")
    return min(d, NORM_DIST_CAP)

"""Center-cell label assignment and distance encoding for the anchor-free head.

Each ground-truth box is regressed from exactly one cell per scale: the cell
holding the box center.  Targets are distances (in cell units) from the
far edges of that cell to the box edges, so a box centred on its cell has
``L = R`` etc.  Predictions squash a logit through a sigmoid and multiply by
a per-scale range (16, 4, 2 cells for strides 32, 16, 8).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import _sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleSpec:
    grid: int
    stride: int
    exponent: int

    @property
    def multiplier(self) -> float:
        return float(2 ** self.exponent)

    @property
    def image_size(self) -> int:
        return self.grid * self.stride


# Coarse to fine, matching the head output order (13, 26, 52 at 416 input).
STRIDES = (32, 16, 8)
EXPONENTS = (4, 2, 1)


def scales_for(image_size: int = 416) -> tuple[ScaleSpec, ...]:
    if image_size % 32:
        raise ValueError(f"image size must be a multiple of 32, got {image_size}")
    return tuple(ScaleSpec(image_size // s, s, e) for s, e in zip(STRIDES, EXPONENTS))


class GridCell(NamedTuple):
    scale: ScaleSpec
    cx: int
    cy: int


class EncodedTarget(NamedTuple):
    L: float
    T: float
    R: float
    B: float


def box_center(box) -> tuple[float, float]:
    x1, y1, x2, y2 = box
    return (x1 + x2) / 2.0, (y1 + y2) / 2.0


def center_inside(box, image_size: int) -> bool:
    x, y = box_center(box)
    return 0 <= x < image_size and 0 <= y < image_size


def assign_positive_cells(box, scales) -> list[GridCell]:
    """One positive cell per scale: the cell containing the box center."""
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {tuple(box)}")
    x, y = box_center(box)
    cells = []
    for sc in scales:
        if not (0 <= x < sc.image_size and 0 <= y < sc.image_size):
            raise ValueError(f"box center ({x}, {y}) outside the {sc.image_size}px frame")
        cells.append(GridCell(sc, int(np.floor(x / sc.stride)), int(np.floor(y / sc.stride))))
    return cells


def encode(box, scale: ScaleSpec) -> EncodedTarget:
    x1, y1, x2, y2 = box
    x, y = box_center(box)
    s = scale.stride
    fx, fy = np.floor(x / s), np.floor(y / s)
    return EncodedTarget(float(fx + 1 - x1 / s), float(fy + 1 - y1 / s),
                         float(x2 / s - fx), float(y2 / s - fy))


def encode_at(boxes: np.ndarray, cx, cy, stride: float) -> np.ndarray:
    """Vectorised encoding of ``(n, 4)`` boxes relative to explicit cells.

    Returns ``(n, 4)`` distances (L, T, R, B).  Non-center cells give the
    generalised targets used by the all-cells box-loss variant.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    return np.stack([cx + 1 - boxes[:, 0] / stride, cy + 1 - boxes[:, 1] / stride,
                     boxes[:, 2] / stride - cx, boxes[:, 3] / stride - cy], axis=1)


def activate(raw, scale: ScaleSpec) -> np.ndarray:
    """Distance logits -> distances in ``(0, 2**exponent)`` cells."""
    return _sigmoid(np.asarray(raw, dtype=np.float64)) * scale.multiplier


def decode(pred, cell: GridCell, clip: bool = True) -> tuple[float, float, float, float]:
    L, T, R, B = (float(v) for v in pred)
    s = cell.scale.stride
    box = (s * (cell.cx + 1 - L), s * (cell.cy + 1 - T), s * (cell.cx + R), s * (cell.cy + B))
    size = cell.scale.image_size
    if fully_outside(box, size):
        log.warning("decoded box %s lies entirely outside the %dpx frame; clipping", box, size)
    if clip:
        box = tuple(float(v) for v in clip_box(np.asarray(box), size))
    return box


def fully_outside(box, size: float) -> bool:
    x1, y1, x2, y2 = box
    return x2 <= 0 or y2 <= 0 or x1 >= size or y1 >= size


def clip_box(boxes: np.ndarray, size: float) -> np.ndarray:
    return np.clip(boxes, 0.0, size)


def decode_grid(dist: np.ndarray, scale: ScaleSpec) -> np.ndarray:
    """Decode a ``(4, S, S)`` grid of activated distances into ``(S, S, 4)`` boxes."""
    S = scale.grid
    cy, cx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    s = scale.stride
    L, T, R, B = dist
    return np.stack([s * (cx + 1 - L), s * (cy + 1 - T), s * (cx + R), s * (cy + B)], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise area IoU between ``(n, 4)`` and ``(m, 4)`` corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two equally shaped ``(..., 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = w * h
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)

"""Geometry-exact preprocessing: square center fill, resize, cropless mosaic.

Every transform here is an axis-aligned affine ``p -> p * scale + offset``
applied identically to pixels and boxes.  Nearest-neighbour resampling
samples the source pixel under each destination pixel center, which keeps
pixel content and labels consistent to within half a pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD_VALUE = 114
SCALE_RANGE = (0.4, 0.6)

log = logging.getLogger(__name__)


@dataclass
class AnnotatedImage:
    pixels: np.ndarray              # (H, W, 3) uint8
    boxes: np.ndarray               # (n, 4) float64 corner boxes, pixels
    source_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Affine:
    """``x' = x * scale + dx``, ``y' = y * scale + dy``."""

    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def apply(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return b * self.scale + np.array([self.dx, self.dy, self.dx, self.dy])

    def invert(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return (b - np.array([self.dx, self.dy, self.dx, self.dy])) / self.scale

    def then(self, other: "Affine") -> "Affine":
        return Affine(self.scale * other.scale, self.dx * other.scale + other.dx, self.dy * other.scale + other.dy)


def center_fill_square(img: AnnotatedImage, pad_value: int = PAD_VALUE) -> tuple[AnnotatedImage, Affine]:
    """Pad the short side so the image is square with the content centred."""
    h, w = img.height, img.width
    side = max(h, w)
    if h == w:
        return img, Affine()
    dx, dy = (side - w) // 2, (side - h) // 2
    out = np.full((side, side, img.pixels.shape[2]), pad_value, dtype=img.pixels.dtype)
    out[dy:dy + h, dx:dx + w] = img.pixels
    tf = Affine(1.0, float(dx), float(dy))
    return AnnotatedImage(out, tf.apply(img.boxes), img.source_id), tf


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize_pixels(pixels: np.ndarray, out_h: int, out_w: int, method: str = "nearest") -> np.ndarray:
    if method == "nearest":
        return pixels[_nearest_index(out_h, pixels.shape[0])][:, _nearest_index(out_w, pixels.shape[1])]
    if method == "bilinear":
        from PIL import Image

        return np.asarray(Image.fromarray(pixels).resize((out_w, out_h), Image.BILINEAR))
    raise ValueError(f"unknown resample method {method!r}")


def resize_square(img: AnnotatedImage, size: int, method: str = "nearest") -> tuple[AnnotatedImage, Affine]:
    if img.height != img.width:
        raise ValueError("resize_square expects a square image; call center_fill_square first")
    tf = Affine(size / img.width)
    return AnnotatedImage(resize_pixels(img.pixels, size, size, method), tf.apply(img.boxes), img.source_id), tf


def letterbox(img: AnnotatedImage, size: int, method: str = "nearest") -> tuple[AnnotatedImage, Affine]:
    """Center-fill to square then resize to ``size``; returns the combined affine."""
    sq, t1 = center_fill_square(img)
    out, t2 = resize_square(sq, size, method)
    return out, t1.then(t2)


@dataclass
class MosaicLayout:
    indices: tuple[int, int, int, int]
    scales: tuple[float, ...]
    offsets: tuple[tuple[int, int], ...]
    sizes: tuple[int, ...]
    canvas: int
    center: tuple[int, int] = (0, 0)
    seed: int | None = None
    extra: dict = field(default_factory=dict)


def sample_layout(rng: np.random.Generator, side: int | Sequence[int], canvas: int = 416,
                  scale_range: tuple[float, float] = SCALE_RANGE) -> MosaicLayout:
    """Random split point; each image scaled to fill its quadrant's short side.

    The split point is drawn uniformly in ``scale_range * canvas`` on both
    axes, so every per-image scale lies in ``scale_range`` (for images of
    ``canvas`` side) and the four placements never overlap.
    """
    sides = [side] * 4 if np.isscalar(side) else list(side)
    lo, hi = scale_range
    xc = int(round(rng.uniform(lo, hi) * canvas))
    yc = int(round(rng.uniform(lo, hi) * canvas))
    order = tuple(int(i) for i in rng.permutation(4))
    quads = ((xc, yc), (canvas - xc, yc), (xc, canvas - yc), (canvas - xc, canvas - yc))
    sizes, offsets, scales = [], [], []
    for q, (qw, qh) in enumerate(quads):
        n = min(qw, qh)
        sizes.append(n)
        scales.append(n / sides[order[q]])
        ox = xc - n if q in (0, 2) else xc
        oy = yc - n if q in (0, 1) else yc
        offsets.append((ox, oy))
    return MosaicLayout(order, tuple(scales), tuple(offsets), tuple(sizes), canvas, (xc, yc))


def quadrant_layout(side: int, canvas: int = 416) -> MosaicLayout:
    """Deterministic 2x2 layout at scale ``canvas / (2 * side)``; mostly for tests."""
    half = canvas // 2
    return MosaicLayout((0, 1, 2, 3), (half / side,) * 4, ((0, 0), (half, 0), (0, half), (half, half)),
                        (half,) * 4, canvas, (half, half))


def mosaic4(imgs: Sequence[AnnotatedImage], rng_seed: int | None = None, layout: MosaicLayout | None = None,
            canvas: int = 416, method: str = "nearest", pad_value: int = PAD_VALUE) -> AnnotatedImage:
    """Merge four square images into one canvas without cropping.

    Quadrant ``q`` (TL, TR, BL, BR) receives ``imgs[layout.indices[q]]``.
    Every input box survives, mapped by the same affine as its pixels.
    """
    if len(imgs) < 4:
        raise ValueError(f"mosaic4 needs 4 images, got {len(imgs)}")
    for im in imgs:
        if im.height != im.width:
            raise ValueError(f"mosaic4 expects square images, {im.source_id!r} is {im.width}x{im.height}")
    if layout is None:
        layout = sample_layout(np.random.default_rng(rng_seed), [im.width for im in imgs[:4]], canvas)
        layout.seed = rng_seed
    out = np.full((layout.canvas, layout.canvas, imgs[0].pixels.shape[2]), pad_value, dtype=np.uint8)
    boxes = []
    for q in range(4):
        im = imgs[layout.indices[q]]
        n = layout.sizes[q]
        ox, oy = layout.offsets[q]
        out[oy:oy + n, ox:ox + n] = resize_pixels(im.pixels, n, n, method)
        boxes.append(Affine(n / im.width, ox, oy).apply(im.boxes))
    ids = ",".join(imgs[i].source_id for i in layout.indices)
    return AnnotatedImage(out, np.concatenate(boxes, axis=0), f"mosaic({ids})")


def to_chw(pixels: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float32 CHW in [0, 1]."""
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32) / 255.0


def draw_boxes(img: AnnotatedImage, path: str | Path, extra_boxes=None, scores=None) -> None:
    """Write ``img`` with its labels (green) and optional detections (red) to ``path``."""
    from PIL import Image, ImageDraw

    canvas = Image.fromarray(img.pixels)
    d = ImageDraw.Draw(canvas)
    for b in img.boxes:
        d.rectangle([float(v) for v in b], outline=(0, 255, 0))
    if extra_boxes is not None:
        for i, b in enumerate(np.asarray(extra_boxes).reshape(-1, 4)):
            d.rectangle([float(v) for v in b], outline=(255, 0, 0))
            if scores is not None:
                d.text((float(b[0]) + 1, float(b[1]) + 1), f"{scores[i]:.2f}", fill=(255, 0, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    log.debug("wrote overlay %s", path)

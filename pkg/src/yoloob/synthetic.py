"""Seeded synthetic scenes: shaded elliptical blobs on textured backgrounds.

Labels are the tight pixel-edge bounding boxes of each rendered blob mask,
so ``(x1, y1, x2, y2)`` covers columns ``x1 .. x2-1`` and rows ``y1 .. y2-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .augment import AnnotatedImage


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_images: int = 64
    height: int = 128
    width: int = 128
    blobs: tuple[int, int] = (1, 3)
    axes: tuple[float, float] = (6.0, 26.0)
    noise: float = 12.0
    seed: int = 0


def ellipse_mask(h: int, w: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _background(rng: np.random.Generator, h: int, w: int, noise: float) -> np.ndarray:
    base = np.array([120.0, 60.0, 50.0]) + rng.uniform(-15, 15, 3)
    low = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 10) * 180
    img = base[None, None, :] + low[..., None] * np.array([0.6, 0.4, 0.3])
    img += rng.standard_normal((h, w, 3)) * noise
    return img


def render_scene(rng: np.random.Generator, spec: SyntheticSceneSpec):
    """One image plus its per-blob masks."""
    h, w = spec.height, spec.width
    img = _background(rng, h, w, spec.noise)
    n = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    masks, boxes = [], []
    for _ in range(n):
        for _attempt in range(50):
            a = rng.uniform(*spec.axes)
            b = a * rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, np.pi)
            r = a + 2
            if 2 * r >= min(h, w):
                continue
            cx, cy = rng.uniform(r, w - r), rng.uniform(r, h - r)
            m = ellipse_mask(h, w, cx, cy, a, b, theta)
            if not m.any():
                continue
            box = mask_bbox(m)
            if any(box[0] < q[2] + 2 and q[0] < box[2] + 2 and box[1] < q[3] + 2 and q[1] < box[3] + 2
                   for q in boxes):
                continue
            masks.append(m)
            boxes.append(box)
            yy, xx = np.mgrid[0:h, 0:w]
            d2 = ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (a * a)
            shade = np.clip(1.0 - 0.5 * d2, 0.4, 1.0)
            color = np.array([225.0, 135.0, 120.0]) + rng.uniform(-20, 20, 3)
            tex = rng.standard_normal((h, w)) * spec.noise * 0.5
            blob = color[None, None, :] * shade[..., None] + tex[..., None]
            img[m] = blob[m]
            break
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), np.asarray(boxes).reshape(-1, 4), masks


def gen_synthetic_dataset(spec: SyntheticSceneSpec, return_masks: bool = False):
    """``spec.num_images`` seeded scenes; optionally also their blob masks."""
    rng = np.random.default_rng(spec.seed)
    images, all_masks = [], []
    for i in range(spec.num_images):
        px, boxes, masks = render_scene(rng, spec)
        images.append(AnnotatedImage(px, boxes, f"synthetic-{spec.seed}-{i:05d}"))
        all_masks.append(masks)
    if return_masks:
        return images, all_masks
    return images

"""Turn raw head logits into scored boxes, then suppress duplicates."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .boxcodec import ScaleSpec, clip_box, decode_grid
from .metrics import NMS_THRESHOLD, nms
from .tensor import _sigmoid

MAX_CANDIDATES = 1000
TW_CLIP = 8.0


def _as_arrays(heads) -> list[np.ndarray]:
    return [np.asarray(getattr(h, "data", h), dtype=np.float64) for h in heads]


def decode_objectbox(heads, scales: Sequence[ScaleSpec]):
    """Per image ``(boxes, scores, scale_index)`` for every cell of every scale."""
    heads = _as_arrays(heads)
    B = heads[0].shape[0]
    out = []
    for b in range(B):
        boxes, scores, lvl = [], [], []
        for i, (raw, sc) in enumerate(zip(heads, scales)):
            dist = _sigmoid(raw[b, :4]) * sc.multiplier
            bx = decode_grid(dist, sc).reshape(-1, 4)
            score = (_sigmoid(raw[b, 4]) * _sigmoid(raw[b, 5])).reshape(-1)
            boxes.append(bx)
            scores.append(score)
            lvl.append(np.full(len(score), i))
        out.append((clip_box(np.concatenate(boxes), scales[0].image_size), np.concatenate(scores),
                    np.concatenate(lvl)))
    return out


def decode_anchor(heads, scales: Sequence[ScaleSpec], anchors):
    heads = _as_arrays(heads)
    B = heads[0].shape[0]
    out = []
    for b in range(B):
        boxes, scores, lvl = [], [], []
        for i, (raw, sc) in enumerate(zip(heads, scales)):
            S, s = sc.grid, sc.stride
            r = raw[b].reshape(3, 6, S, S)
            cy, cx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
            aw = np.asarray([a[0] for a in anchors[i]])[:, None, None]
            ah = np.asarray([a[1] for a in anchors[i]])[:, None, None]
            x = (_sigmoid(r[:, 0]) + cx) * s
            y = (_sigmoid(r[:, 1]) + cy) * s
            w = aw * np.exp(np.minimum(r[:, 2], TW_CLIP))
            h = ah * np.exp(np.minimum(r[:, 3], TW_CLIP))
            boxes.append(np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=-1).reshape(-1, 4))
            sc_ = _sigmoid(r[:, 4]) * _sigmoid(r[:, 5])
            scores.append(sc_.reshape(-1))
            lvl.append(np.full(sc_.size, i))
        out.append((clip_box(np.concatenate(boxes), scales[0].image_size), np.concatenate(scores),
                    np.concatenate(lvl)))
    return out


def postprocess(heads, scales: Sequence[ScaleSpec], head_kind: str = "objectbox", anchors=(),
                conf_floor: float = 0.0, nms_threshold: float = NMS_THRESHOLD,
                max_candidates: int = MAX_CANDIDATES) -> list[tuple[np.ndarray, np.ndarray]]:
    """Decode, drop scores below ``conf_floor``, keep the top candidates, NMS.

    Returns per image ``(boxes, scores)`` sorted by descending score.
    """
    if head_kind == "objectbox":
        raw = decode_objectbox(heads, scales)
    else:
        raw = decode_anchor(heads, scales, anchors)
    out = []
    for boxes, scores, _ in raw:
        ok = (scores >= conf_floor) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores = boxes[ok], scores[ok]
        if len(scores) > max_candidates:
            top = np.argsort(-scores, kind="stable")[:max_candidates]
            boxes, scores = boxes[top], scores[top]
        keep = nms(boxes, scores, nms_threshold)
        out.append((boxes[keep], scores[keep]))
    return out

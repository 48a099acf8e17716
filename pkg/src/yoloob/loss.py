"""Detection losses with closed-form gradients w.r.t. the raw head logits.

``objectbox_loss`` is the anchor-free objective: SDIoU box loss at center
cells, objectness BCE over every cell, optional class BCE at positives.
``anchor_loss`` is a compact YOLOv3-style objective for the anchor baseline
head so the ablation configurations can be trained with the same driver.

Both return ``(LossBreakdown, grads)`` with one gradient array per head
output.  Losses are summed over cells and averaged over images.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .boxcodec import ScaleSpec, box_iou, decode_grid, encode_at, paired_iou
from .tensor import _sigmoid

C_EPS = 1e-6
BOX_CELLS = ("positives", "all")
OBJ_TARGETS = ("assigned", "overlap")


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.05
    obj: float = 1.0

    def __post_init__(self):
        if self.box < 0 or self.obj < 0:
            raise ValueError("loss weights must be nonnegative")


class SDIoUTerms(NamedTuple):
    S: np.ndarray
    w_I: np.ndarray
    h_I: np.ndarray
    I: np.ndarray
    w_C: np.ndarray
    h_C: np.ndarray
    C: np.ndarray
    sdiou: np.ndarray
    loss_box: np.ndarray
    c_clamped: np.ndarray


@dataclass
class LossBreakdown:
    loss_box: float
    loss_obj: float
    loss_cls: float
    loss_total: float
    num_positives: int
    c_clamped: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def sdiou(pred, gt) -> tuple[np.ndarray, SDIoUTerms]:
    """Squared-distance IoU between distance 4-vectors (L, T, R, B).

    Works on arrays shaped ``(..., 4)``.  Intersection widths are clamped at
    zero and covering widths at ``C_EPS``.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    S = ((p - g) ** 2).sum(axis=-1)
    mn = np.minimum(p, g)
    mx = np.maximum(p, g)
    w_I = np.maximum(mn[..., 0] + mn[..., 2] - 1.0, 0.0)
    h_I = np.maximum(mn[..., 1] + mn[..., 3] - 1.0, 0.0)
    w_C_raw = mx[..., 0] + mx[..., 2] - 1.0
    h_C_raw = mx[..., 1] + mx[..., 3] - 1.0
    clamped = (w_C_raw < C_EPS) | (h_C_raw < C_EPS)
    w_C = np.maximum(w_C_raw, C_EPS)
    h_C = np.maximum(h_C_raw, C_EPS)
    I = w_I ** 2 + h_I ** 2
    C = w_C ** 2 + h_C ** 2
    val = (I - S) / C
    return val, SDIoUTerms(S, w_I, h_I, I, w_C, h_C, C, val, 1.0 - val, clamped)


def sdiou_grad(pred, gt) -> np.ndarray:
    """d SDIoU / d pred, shape ``(..., 4)``.

    At ties the prediction is treated as the argmin (for the intersection)
    and the argmax (for the covering box).
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _, t = sdiou(p, g)
    dS = 2.0 * (p - g)
    in_min = (p <= g).astype(np.float64)
    in_max = (p >= g).astype(np.float64)
    mn = np.minimum(p, g)
    mx = np.maximum(p, g)
    wI_on = (mn[..., 0] + mn[..., 2] - 1.0) > 0
    hI_on = (mn[..., 1] + mn[..., 3] - 1.0) > 0
    wC_on = (mx[..., 0] + mx[..., 2] - 1.0) > C_EPS
    hC_on = (mx[..., 1] + mx[..., 3] - 1.0) > C_EPS
    dI = np.empty_like(p)
    dC = np.empty_like(p)
    for k, (wi, w_on, w_c, wc_on) in enumerate(((t.w_I, wI_on, t.w_C, wC_on), (t.h_I, hI_on, t.h_C, hC_on),
                                                 (t.w_I, wI_on, t.w_C, wC_on), (t.h_I, hI_on, t.h_C, hC_on))):
        dI[..., k] = 2.0 * wi * w_on * in_min[..., k]
        dC[..., k] = 2.0 * w_c * wc_on * in_max[..., k]
    C = t.C[..., None]
    return (dI - dS) / C - (t.I - t.S)[..., None] * dC / C ** 2


def _bce_logits(logit: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    loss = np.logaddexp(0.0, logit) - target * logit
    return loss, _sigmoid(logit) - target


class _Assignment(NamedTuple):
    mask: np.ndarray        # (B, S, S) bool: cells with a box-regression target
    center: np.ndarray      # (B, S, S) bool: center cells
    target: np.ndarray      # (B, 4, S, S) distances
    gt_box: np.ndarray      # (B, S, S, 4) matched box in image pixels


def valid_boxes(boxes, image_size: float) -> np.ndarray:
    """Drop degenerate boxes and boxes whose center falls outside the frame."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (b[:, 0] + b[:, 2]) / 2
    cy = (b[:, 1] + b[:, 3]) / 2
    keep = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) & (cx >= 0) & (cx < image_size) & (cy >= 0) & (cy < image_size)
    return b[keep]


def _assign(gts: Sequence[np.ndarray], scale: ScaleSpec, box_cells: str) -> _Assignment:
    B, S, s = len(gts), scale.grid, scale.stride
    mask = np.zeros((B, S, S), bool)
    center = np.zeros((B, S, S), bool)
    target = np.zeros((B, 4, S, S))
    gt_box = np.zeros((B, S, S, 4))
    for b, boxes in enumerate(gts):
        boxes = valid_boxes(boxes, scale.image_size)
        if not len(boxes):
            continue
        # Larger boxes first so smaller ones win shared cells.
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        for box in boxes[np.argsort(-area, kind="stable")]:
            cx = int(np.floor((box[0] + box[2]) / 2 / s))
            cy = int(np.floor((box[1] + box[3]) / 2 / s))
            if box_cells == "all":
                xs = np.arange(max(int(np.floor(box[0] / s)), 0), min(int(np.ceil(box[2] / s)), S))
                ys = np.arange(max(int(np.floor(box[1] / s)), 0), min(int(np.ceil(box[3] / s)), S))
                gy, gx = np.meshgrid(ys, xs, indexing="ij")
                gx, gy = gx.ravel(), gy.ravel()
            else:
                gx, gy = np.array([cx]), np.array([cy])
            enc = encode_at(np.repeat(box[None], len(gx), 0), gx, gy, s)
            ok = (enc > 0).all(axis=1)
            gx, gy, enc = gx[ok], gy[ok], enc[ok]
            mask[b, gy, gx] = True
            target[b, :, gy, gx] = enc
            gt_box[b, gy, gx] = box
            center[b, cy, cx] = True
    return _Assignment(mask, center, target, gt_box)


def objectbox_loss(heads: Sequence[np.ndarray], gts: Sequence[np.ndarray], scales: Sequence[ScaleSpec],
                   weights: LossWeights = LossWeights(), box_cells: str = "positives",
                   obj_target: str = "assigned", class_loss: bool = True,
                   obj_targets: Sequence[np.ndarray] | None = None):
    """Anchor-free detection loss.

    Args:
        heads: raw logits per scale, each ``(B, 6, S, S)``; channel order is
            distances (L, T, R, B), confidence, class.
        gts: per image ``(n, 4)`` corner boxes in input pixels.
        scales: scale specs aligned with ``heads``.
        box_cells: ``"positives"`` regresses only center cells; ``"all"``
            regresses every cell covered by a box.
        obj_target: ``"assigned"`` sets the objectness target to the IoU of
            the decoded box at regressed cells and 0 elsewhere; ``"overlap"``
            uses the best IoU against any box at every cell.
        class_loss: add BCE(class, 1) at center cells to the objectness term.
        obj_targets: optional frozen objectness targets, one ``(B, S, S)``
            array per scale; replaces the computed IoU targets.

    Returns:
        ``(LossBreakdown, grads)`` where ``grads[i]`` has the shape of ``heads[i]``.
    """
    if box_cells not in BOX_CELLS:
        raise ValueError(f"box_cells must be one of {BOX_CELLS}")
    if obj_target not in OBJ_TARGETS:
        raise ValueError(f"obj_target must be one of {OBJ_TARGETS}")
    B = heads[0].shape[0]
    if len(gts) != B:
        raise ValueError(f"{len(gts)} ground-truth lists for a batch of {B}")
    tot_box = tot_obj = tot_cls = 0.0
    npos = nclamp = 0
    grads = []
    for si, (raw, sc) in enumerate(zip(heads, scales)):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[1:] != (6, sc.grid, sc.grid):
            raise ValueError(f"head {si} has shape {raw.shape}, expected (B, 6, {sc.grid}, {sc.grid})")
        g = np.zeros_like(raw)
        m = sc.multiplier
        dist = _sigmoid(raw[:, :4]) * m
        a = _assign(gts, sc, box_cells)
        bi, yi, xi = np.nonzero(a.mask)
        if len(bi):
            p = dist[bi, :, yi, xi]
            t = a.target[bi, :, yi, xi]
            val, terms = sdiou(p, t)
            tot_box += float((1.0 - val).sum())
            nclamp += int(terms.c_clamped.sum())
            dp = -sdiou_grad(p, t) * weights.box
            g[bi, :4, yi, xi] = dp * p * (1.0 - p / m)
            npos += len(bi)
        if obj_targets is not None:
            o = np.asarray(obj_targets[si], dtype=np.float64)
        else:
            o = _iou_targets(dist, a, gts, sc, obj_target)
        lo, go = _bce_logits(raw[:, 4], o)
        tot_obj += float(lo.sum())
        g[:, 4] = go * weights.obj
        if class_loss:
            ci, cy, cx = np.nonzero(a.center)
            if len(ci):
                lc, gc = _bce_logits(raw[ci, 5, cy, cx], np.ones(len(ci)))
                tot_cls += float(lc.sum())
                g[ci, 5, cy, cx] = gc * weights.obj
        grads.append(g / B)
    loss_box, loss_obj, loss_cls = tot_box / B, (tot_obj + tot_cls) / B, tot_cls / B
    total = weights.box * loss_box + weights.obj * loss_obj
    return LossBreakdown(loss_box, loss_obj, loss_cls, total, npos, nclamp), grads


def _iou_targets(dist, a: _Assignment, gts, sc: ScaleSpec, obj_target: str) -> np.ndarray:
    B = dist.shape[0]
    boxes = np.stack([decode_grid(dist[b], sc) for b in range(B)])
    o = np.zeros((B, sc.grid, sc.grid))
    if obj_target == "assigned":
        bi, yi, xi = np.nonzero(a.mask)
        if len(bi):
            o[bi, yi, xi] = paired_iou(boxes[bi, yi, xi], a.gt_box[bi, yi, xi])
    else:
        for b in range(B):
            gb = valid_boxes(gts[b], sc.image_size)
            if len(gb):
                o[b] = box_iou(boxes[b].reshape(-1, 4), gb).max(axis=1).reshape(sc.grid, sc.grid)
    return o


def objectness_targets(heads, gts, scales, box_cells: str = "positives", obj_target: str = "assigned"):
    """The IoU objectness targets ``objectbox_loss`` would use for these logits."""
    out = []
    for raw, sc in zip(heads, scales):
        dist = _sigmoid(np.asarray(raw, dtype=np.float64)[:, :4]) * sc.multiplier
        out.append(_iou_targets(dist, _assign(gts, sc, box_cells), gts, sc, obj_target))
    return out


# ------------------------------------------------------------ anchor baseline

def _wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + anchors[None, :, 0] * anchors[None, :, 1] - inter
    return inter / union


def anchor_loss(heads: Sequence[np.ndarray], gts: Sequence[np.ndarray], scales: Sequence[ScaleSpec],
                anchors, weights: LossWeights = LossWeights(), class_loss: bool = True):
    """YOLOv3-style loss: each box goes to its best-shape anchor out of nine.

    Box loss is squared error on sigmoid offsets and log-size ratios, scaled
    by ``2 - area / image_area`` and weighted by ``weights.box`` as in the
    ObjectBox loss, so both heads share one recipe. Objectness is BCE with
    target 1 at the assigned anchor and 0 elsewhere.
    """
    B = heads[0].shape[0]
    flat = np.asarray([a for lvl in anchors for a in lvl], dtype=np.float64)
    img = scales[0].image_size
    raws = [np.asarray(h, dtype=np.float64).reshape(B, 3, 6, sc.grid, sc.grid) for h, sc in zip(heads, scales)]
    grads = [np.zeros_like(r) for r in raws]
    tot_box = tot_obj = tot_cls = 0.0
    obj_t = [np.zeros((B, 3, sc.grid, sc.grid)) for sc in scales]
    npos = 0
    for b, boxes in enumerate(gts):
        boxes = valid_boxes(boxes, img)
        if not len(boxes):
            continue
        wh = boxes[:, 2:] - boxes[:, :2]
        best = _wh_iou(wh, flat).argmax(axis=1)
        for box, (w, h), a in zip(boxes, wh, best):
            lvl, j = divmod(int(a), 3)
            sc = scales[lvl]
            s = sc.stride
            x, y = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            cx, cy = int(x // s), int(y // s)
            r = raws[lvl][b, j, :, cy, cx]
            gr = grads[lvl][b, j, :, cy, cx]
            scale_w = 2.0 - w * h / (img * img)
            tgt = np.array([x / s - cx, y / s - cy, np.log(w / flat[a, 0]), np.log(h / flat[a, 1])])
            sxy = _sigmoid(r[:2])
            dxy = sxy - tgt[:2]
            dwh = r[2:4] - tgt[2:]
            tot_box += scale_w * float((dxy ** 2).sum() + (dwh ** 2).sum())
            gr[:2] += weights.box * scale_w * 2 * dxy * sxy * (1 - sxy)
            gr[2:4] += weights.box * scale_w * 2 * dwh
            obj_t[lvl][b, j, cy, cx] = 1.0
            if class_loss:
                lc, gc = _bce_logits(r[5:6], np.ones(1))
                tot_cls += float(lc.sum())
                gr[5] += gc[0] * weights.obj
            npos += 1
    for lvl, r in enumerate(raws):
        lo, go = _bce_logits(r[:, :, 4], obj_t[lvl])
        tot_obj += float(lo.sum())
        grads[lvl][:, :, 4] += go * weights.obj
    out = [g.reshape(h.shape) / B for g, h in zip(grads, heads)]
    loss_box, loss_obj = tot_box / B, (tot_obj + tot_cls) / B
    total = weights.box * loss_box + weights.obj * loss_obj
    return LossBreakdown(loss_box, loss_obj, tot_cls / B, total, npos), out

"""Post-processing and single-class detection metrics.

Detections are handled as parallel arrays: ``boxes`` ``(n, 4)`` corner
boxes and ``scores`` ``(n,)``.  Ordering everywhere is score descending,
ties broken by ascending ``x1`` (stable beyond that).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .boxcodec import box_iou

IOU_THRESHOLD = 0.5
CONF_THRESHOLD = 0.25
NMS_THRESHOLD = 0.45
MATCH_RULES = ("iou", "centroid")

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    scale: int = -1


@dataclass
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0  # no polyp-free frames, always 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.FP + other.FP, self.FN + other.FN, 0)


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int
    ap: float
    degenerate: bool = False
    classes: int = 1
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["threshold,precision,recall"]
        rows += [f"{t:.6f},{p:.6f},{r:.6f}" for t, p, r in zip(self.thresholds, self.precision, self.recall)]
        return "\n".join(rows) + "\n"


def order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.lexsort((boxes[:, 0], -np.asarray(scores, dtype=np.float64)))


def nms(boxes, scores, iou_threshold: float = NMS_THRESHOLD) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in keep order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    idx = order(boxes, scores)
    keep = []
    while idx.size:
        i = idx[0]
        keep.append(i)
        if idx.size == 1:
            break
        ious = box_iou(boxes[i:i + 1], boxes[idx[1:]])[0]
        idx = idx[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Detection], iou_threshold: float = NMS_THRESHOLD) -> list[Detection]:
    if not dets:
        return []
    keep = nms(np.array([d.box for d in dets]), np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


def match_detections(boxes, scores, gts, iou_threshold: float = IOU_THRESHOLD,
                     rule: str = "iou") -> tuple[ConfusionCounts, np.ndarray]:
    """Greedy one-to-one matching of one image's detections to its ground truth.

    Detections are visited by descending score.  Under ``rule="iou"`` a
    detection is a TP when its best-IoU unmatched ground truth reaches
    ``iou_threshold``; under ``"centroid"`` when its center lies inside an
    unmatched ground truth (the one with highest IoU is taken).

    Returns the counts and a boolean TP flag per detection (input order).
    """
    if rule not in MATCH_RULES:
        raise ValueError(f"rule must be one of {MATCH_RULES}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(boxes), bool)
    if not len(gts):
        return ConfusionCounts(0, len(boxes), 0), flags
    ious = box_iou(boxes, gts)
    taken = np.zeros(len(gts), bool)
    for i in order(boxes, scores):
        if rule == "iou":
            cand = np.where(taken, -1.0, ious[i])
            j = int(np.argmax(cand))
            hit = cand[j] >= iou_threshold
        else:
            cx, cy = (boxes[i, 0] + boxes[i, 2]) / 2, (boxes[i, 1] + boxes[i, 3]) / 2
            inside = (~taken) & (gts[:, 0] <= cx) & (cx <= gts[:, 2]) & (gts[:, 1] <= cy) & (cy <= gts[:, 3])
            cand = np.where(inside, ious[i], -1.0)
            j = int(np.argmax(cand))
            hit = bool(inside.any())
        if hit:
            taken[j] = True
            flags[i] = True
    tp = int(flags.sum())
    return ConfusionCounts(tp, len(boxes) - tp, len(gts) - tp), flags


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(c: ConfusionCounts) -> PRF:
    degenerate = (c.TP + c.FP) == 0 or (c.TP + c.FN) == 0
    p = c.TP / (c.TP + c.FP) if c.TP + c.FP else 0.0
    r = c.TP / (c.TP + c.FN) if c.TP + c.FN else 0.0
    return PRF(p, r, f1_score(p, r), degenerate)


def evaluate_counts(dets: Sequence[tuple[np.ndarray, np.ndarray]], gts: Sequence[np.ndarray],
                    conf_threshold: float = CONF_THRESHOLD, iou_threshold: float = IOU_THRESHOLD,
                    rule: str = "iou") -> ConfusionCounts:
    """Per-frame matching at a confidence floor, summed over images."""
    total = ConfusionCounts()
    for (boxes, scores), gt in zip(dets, gts):
        scores = np.asarray(scores, dtype=np.float64)
        keep = scores >= conf_threshold
        c, _ = match_detections(np.asarray(boxes).reshape(-1, 4)[keep], scores[keep], gt, iou_threshold, rule)
        total = total + c
    return total


def average_precision(dets: Sequence[tuple[np.ndarray, np.ndarray]], gts: Sequence[np.ndarray],
                      iou_threshold: float = IOU_THRESHOLD, rule: str = "iou") -> PRCurve:
    """Area under the precision-envelope PR curve over all distinct scores.

    ``dets`` and ``gts`` are aligned per image.  With a single class this is
    also the mAP.  Zero ground truth gives ``ap = nan`` and ``degenerate``.
    """
    all_scores, all_tp = [], []
    num_gt = 0
    for (boxes, scores), gt in zip(dets, gts):
        scores = np.asarray(scores, dtype=np.float64)
        _, flags = match_detections(boxes, scores, gt, iou_threshold, rule)
        all_scores.append(scores)
        all_tp.append(flags)
        num_gt += len(np.asarray(gt).reshape(-1, 4))
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, bool)
    if num_gt == 0:
        log.warning("average_precision: no ground truth, AP undefined")
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0, float("nan"), degenerate=True)
    idx = np.argsort(-scores, kind="stable")
    s, t = scores[idx], tp[idx].astype(np.float64)
    ctp, cfp = np.cumsum(t), np.cumsum(1.0 - t)
    # One PR point per distinct score: the last position of each tie group.
    ends = np.nonzero(np.r_[s[1:] != s[:-1], True])[0] if len(s) else np.zeros(0, np.int64)
    thr = s[ends]
    prec = ctp[ends] / (ctp[ends] + cfp[ends])
    rec = ctp[ends] / num_gt
    env = np.maximum.accumulate(prec[::-1])[::-1] if len(prec) else prec
    dr = np.diff(np.r_[0.0, rec])
    ap = float((dr * env).sum())
    return PRCurve(thr, prec, rec, num_gt, ap)


def confusion_report(c: ConfusionCounts) -> str:
    """Text table laid out like a 2x2 confusion matrix."""
    prf = precision_recall_f1(c)
    w = max(len(str(v)) for v in (c.TP, c.FP, c.FN, c.TN, "TP")) + 2
    lines = [
        f"{'':<16}{'Predicted polyp':>{w + 14}}{'Predicted non-polyp':>{w + 18}}",
        f"{'Actual polyp':<16}{c.TP:>{w + 14}}{c.FN:>{w + 18}}",
        f"{'Actual non-polyp':<16}{c.FP:>{w + 14}}{c.TN:>{w + 18}}",
        f"precision={prf.precision:.4f} recall={prf.recall:.4f} f1={prf.f1:.4f}"
        + (" (degenerate)" if prf.degenerate else ""),
    ]
    return "\n".join(lines)

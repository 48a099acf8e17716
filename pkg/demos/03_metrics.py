"""NMS, one-to-one matching, P/R/F1 and the PR curve on a toy scene."""

import numpy as np

from yoloob.metrics import average_precision, confusion_report, evaluate_counts, match_detections, nms

gts = [np.array([[10, 10, 50, 50], [60, 60, 100, 100.0]]), np.array([[20, 30, 70, 90.0]])]
raw = [
    (np.array([[11, 9, 51, 49], [12, 11, 50, 52], [61, 58, 98, 101], [0, 80, 20, 100.0]]),
     np.array([0.95, 0.90, 0.60, 0.30])),
    (np.array([[22, 28, 69, 88], [100, 0, 120, 20.0]]), np.array([0.85, 0.40])),
]

# Suppress near duplicates first
dets = []
for boxes, scores in raw:
    keep = nms(boxes, scores, 0.45)
    print("kept", keep.tolist(), "of", len(scores))
    dets.append((boxes[keep], scores[keep]))

counts, flags = match_detections(*dets[0], gts[0])
print("image 0 TP flags:", flags.tolist())

total = evaluate_counts(dets, gts, conf_threshold=0.25)
print(confusion_report(total))

curve = average_precision(dets, gts)
print(curve.to_csv())
print(f"AP = mAP (single class) = {curve.ap:.4f}")

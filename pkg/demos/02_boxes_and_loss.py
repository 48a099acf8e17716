"""Center-cell assignment, distance encoding and the SDIoU box loss, by hand."""

import numpy as np

from yoloob.boxcodec import assign_positive_cells, decode, encode, scales_for
from yoloob.loss import objectbox_loss, sdiou, sdiou_grad

scales = scales_for(416)
box = (100.0, 120.0, 180.0, 170.0)

# One positive cell per scale: the one holding the box center (140, 145).
for cell in assign_positive_cells(box, scales):
    enc = encode(box, cell.scale)
    back = decode(enc, cell)
    print(f"stride {cell.scale.stride:2d} cell ({cell.cx:2d},{cell.cy:2d}) "
          f"L,T,R,B = {np.round(enc, 3)}  range {cell.scale.multiplier:g}  decoded {np.round(back, 6)}")

# SDIoU on distances: 1 at an exact match, negative for a poor prediction.
gt = np.array([2.0, 1.5, 2.5, 3.0])
for pred in ([2.0, 1.5, 2.5, 3.0], [1.8, 1.6, 2.7, 2.6], [1, 1, 1, 1]):
    val, t = sdiou(pred, gt)
    print(f"pred {pred}: sdiou {float(val):+.4f}  I {float(t.I):.2f}  S {float(t.S):.2f}  C {float(t.C):.2f}")

# A gradient step on the prediction increases SDIoU.
p = np.array([1.0, 1.0, 1.0, 1.0])
for step in range(5):
    p = p + 0.5 * sdiou_grad(p, gt)
    print(f"step {step + 1}: sdiou {float(sdiou(p, gt)[0]):+.4f}")

# Whole-image loss at 128 px input with random logits and two boxes.
sc = scales_for(128)
rng = np.random.default_rng(0)
heads = [rng.standard_normal((1, 6, s.grid, s.grid)) for s in sc]
gts = [np.array([[10.0, 12, 40, 50], [70, 60, 120, 110]])]
br, grads = objectbox_loss(heads, gts, sc)
print("\n", br.as_dict())
print("gradient norms per scale:", [round(float(np.linalg.norm(g)), 3) for g in grads])

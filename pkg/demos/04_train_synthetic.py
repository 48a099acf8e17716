"""A short training run on synthetic pseudo-polyps, then inference with overlays.

The full desk run (configs/desk.json) takes about a quarter of an hour; this
one trains for a few epochs on a smaller set so the whole loop is visible.

    python demos/04_train_synthetic.py --epochs 4 --out runs/demo
"""

import argparse
import json
from pathlib import Path

from yoloob.cli import main

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=4)
ap.add_argument("--images", type=int, default=256)
ap.add_argument("--out", default="runs/demo")
args = ap.parse_args()
out = Path(args.out)

main(["train", "--synthetic", str(args.images), "--synthetic-val", "32", "--epochs", str(args.epochs),
      "--batch-size", "8", "--mosaic", "off", "--out", str(out / "train")])

for line in (out / "train" / "metrics.jsonl").read_text().splitlines():
    rec = json.loads(line)
    print(f"epoch {rec['epoch']:2d}  lr {rec['lr']:.5f}  box {rec['loss_box']:.3f}  obj {rec['loss_obj']:.3f}  "
          f"mAP {rec.get('mAP', float('nan')):.3f}")

ck = str(out / "train" / "checkpoint.ckpt")
main(["eval", "--checkpoint", ck, "--synthetic-val", "32", "--pr-csv", str(out / "pr.csv")])
main(["infer", "--checkpoint", ck, "--synthetic-val", "8", "--out", str(out / "detections.json"),
      "--overlays", str(out / "overlays")])
print("overlays in", out / "overlays")

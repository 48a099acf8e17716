"""Annotation ingestion and export.

Two layouts are read:

* a directory of images, each with a sibling ``.txt`` holding normalized
  ``class cx cy w h`` lines;
* a JSON index ``{"images": [{"file": ..., "boxes": [[x1, y1, x2, y2], ...]}]}``
  with absolute corner boxes and paths relative to the index file.

Unreadable or malformed entries are skipped with a warning and reported back.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AnnotatedImage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


def _read_pixels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def parse_yolo_lines(text: str, width: int, height: int) -> np.ndarray:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        _, cx, cy, w, h = (float(v) for v in parts)
        if w <= 0 or h <= 0:
            raise ValueError(f"line {lineno}: non-positive box size")
        boxes.append(((cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height))
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def load_yolo_dir(root: str | Path) -> tuple[list[AnnotatedImage], list[str]]:
    root = Path(root)
    images, problems = [], []
    for path in sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        label = path.with_suffix(".txt")
        try:
            if not label.exists():
                raise FileNotFoundError("missing annotation file")
            px = _read_pixels(path)
            boxes = parse_yolo_lines(label.read_text(), px.shape[1], px.shape[0])
        except Exception as exc:  # noqa: BLE001 - any bad file is skipped
            msg = f"{path.name}: {exc}"
            log.warning("skipping %s", msg)
            problems.append(msg)
            continue
        images.append(AnnotatedImage(px, boxes, path.stem))
    return images, problems


def load_index(index: str | Path) -> tuple[list[AnnotatedImage], list[str]]:
    index = Path(index)
    try:
        doc = json.loads(index.read_text())
        entries = doc["images"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{index}: unreadable index ({exc})") from None
    images, problems = [], []
    for e in entries:
        try:
            path = index.parent / e["file"]
            px = _read_pixels(path)
            boxes = np.asarray(e.get("boxes", []), dtype=np.float64).reshape(-1, 4)
            if len(boxes) and not ((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])).all():
                raise ValueError("degenerate box")
        except Exception as exc:  # noqa: BLE001
            msg = f"{e.get('file', e) if isinstance(e, dict) else e}: {exc}"
            log.warning("skipping %s", msg)
            problems.append(msg)
            continue
        images.append(AnnotatedImage(px, boxes, Path(e["file"]).stem))
    return images, problems


def load_dataset(path: str | Path) -> tuple[list[AnnotatedImage], list[str]]:
    path = Path(path)
    if path.is_dir():
        return load_yolo_dir(path)
    if path.is_file():
        return load_index(path)
    raise DataError(f"{path}: no such dataset")


def write_yolo_dir(images, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for im in images:
        Image.fromarray(im.pixels).save(root / f"{im.source_id}.png")
        h, w = im.height, im.width
        lines = [f"0 {(b[0] + b[2]) / 2 / w:.8f} {(b[1] + b[3]) / 2 / h:.8f} {(b[2] - b[0]) / w:.8f} "
                 f"{(b[3] - b[1]) / h:.8f}" for b in im.boxes]
        (root / f"{im.source_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def write_index(images, index: str | Path) -> None:
    index = Path(index)
    index.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for im in images:
        name = f"{im.source_id}.png"
        Image.fromarray(im.pixels).save(index.parent / name)
        entries.append({"file": name, "boxes": [[float(v) for v in b] for b in im.boxes]})
    index.write_text(json.dumps({"images": entries}, indent=1))

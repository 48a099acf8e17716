"""SGD training driver with exponential learning-rate decay.

Per iteration the learning rate is ``lr_base * 0.99 ** (300 * done / max)``.
Weight decay is folded into the gradient before the momentum buffer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .arch import Network, NetworkGraph, build_network
from .augment import AnnotatedImage, letterbox, mosaic4, to_chw
from .boxcodec import scales_for
from .detect import postprocess
from .loss import LossBreakdown, LossWeights, anchor_loss, objectbox_loss
from .metrics import CONF_THRESHOLD, IOU_THRESHOLD, NMS_THRESHOLD, average_precision, evaluate_counts, \
    precision_recall_f1

log = logging.getLogger(__name__)

DECAY_BASE = 0.99
DECAY_SPAN = 300.0


class DivergenceError(RuntimeError):
    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr_base: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    preset: str = "full"
    mosaic: bool = True
    mosaic_prob: float = 1.0
    box_cells: str = "positives"
    obj_target: str = "assigned"
    class_loss: bool = True
    loss_box_weight: float = 0.05
    loss_obj_weight: float = 1.0
    iou_threshold: float = IOU_THRESHOLD
    conf_threshold: float = CONF_THRESHOLD
    nms_threshold: float = NMS_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_base", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def lr_schedule(iters_done: int, iters_max: int, lr_base: float = 0.01) -> float:
    if iters_max <= 0:
        raise ValueError("iters_max must be positive")
    if not 0 <= iters_done <= iters_max:
        raise ValueError(f"iters_done={iters_done} outside [0, {iters_max}]")
    return lr_base * DECAY_BASE ** (DECAY_SPAN * iters_done / iters_max)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float, momentum: float,
             weight_decay: float, state: list[np.ndarray | None]) -> None:
    """In-place heavy-ball update: ``v = m v + (g + wd p)``, ``p -= lr v``."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; step aborted")
    if not state:
        state.extend([None] * len(params))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            v = state[i]
            state[i] = d.copy() if v is None else momentum * v + d
            d = state[i]
        p -= (lr * d).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Sequence[T.Tensor], momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: list[np.ndarray | None] = []

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], lr, self.momentum,
                 self.weight_decay, self.state)


# ------------------------------------------------------------------ helpers

def prepare(images: Sequence[AnnotatedImage], size: int, method: str = "nearest") -> list[AnnotatedImage]:
    return [letterbox(im, size, method)[0] for im in images]


def compute_loss(net: Network, heads: Sequence[T.Tensor], gts, cfg: TrainConfig) -> tuple[T.Tensor, LossBreakdown]:
    graph = net.graph
    scales = scales_for(graph.input_size)
    raw = [h.data for h in heads]
    weights = LossWeights(cfg.loss_box_weight, cfg.loss_obj_weight)
    if graph.head_kind == "objectbox":
        br, grads = objectbox_loss(raw, gts, scales, weights, cfg.box_cells, cfg.obj_target, cfg.class_loss)
    else:
        br, grads = anchor_loss(raw, gts, scales, graph.anchors, weights, cfg.class_loss)
    return T.custom(br.loss_total, list(heads), grads), br


def predict(net: Network, images: Sequence[AnnotatedImage], batch_size: int = 16, conf_floor: float = 0.0,
            nms_threshold: float = NMS_THRESHOLD) -> list[tuple[np.ndarray, np.ndarray]]:
    """Eval-mode detections for already letterboxed images."""
    g = net.graph
    scales = scales_for(g.input_size)
    out = []
    for i in range(0, len(images), batch_size):
        x = np.stack([to_chw(im.pixels) for im in images[i:i + batch_size]])
        heads = net.forward(x, train=False)
        out.extend(postprocess(heads, scales, g.head_kind, g.anchors, conf_floor, nms_threshold))
    return out


def evaluate(net: Network, images: Sequence[AnnotatedImage], cfg: TrainConfig | None = None) -> dict:
    cfg = cfg or TrainConfig()
    dets = predict(net, images, cfg.batch_size, 0.0, cfg.nms_threshold)
    gts = [im.boxes for im in images]
    counts = evaluate_counts(dets, gts, cfg.conf_threshold, cfg.iou_threshold)
    prf = precision_recall_f1(counts)
    curve = average_precision(dets, gts, cfg.iou_threshold)
    return {"P": prf.precision, "R": prf.recall, "F1": prf.f1, "mAP": curve.ap,
            "TP": counts.TP, "FP": counts.FP, "FN": counts.FN, "curve": curve, "detections": dets}


@dataclass
class TrainResult:
    network: Network
    history: list[dict] = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.history)


def _batch_samples(rng: np.random.Generator, pool: Sequence[AnnotatedImage], idx: np.ndarray,
                   cfg: TrainConfig, size: int) -> list[AnnotatedImage]:
    out = []
    for i in idx:
        if cfg.mosaic and rng.random() < cfg.mosaic_prob:
            picks = [int(i)] + [int(j) for j in rng.integers(0, len(pool), 3)]
            out.append(mosaic4([pool[j] for j in picks], rng_seed=int(rng.integers(2 ** 31)), canvas=size))
        else:
            out.append(pool[int(i)])
    return out


def train(cfg: TrainConfig, dataset: Sequence[AnnotatedImage], val: Sequence[AnnotatedImage] | None = None,
          graph: NetworkGraph | None = None, log_path: str | Path | None = None,
          eval_every: int = 1) -> TrainResult:
    """Train from scratch on ``dataset``; evaluate on ``val`` after each epoch.

    Images are letterboxed to the graph's input size first.  The metrics log
    gets one JSON record per epoch.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    graph = graph or build_network(preset=cfg.preset)
    net = Network(graph, seed=cfg.seed)
    size = graph.input_size
    pool = prepare(dataset, size)
    val_set = prepare(val, size) if val else []
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    per_epoch = math.ceil(len(pool) / cfg.batch_size)
    iters_max = cfg.epochs * per_epoch
    result = TrainResult(net)
    it = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(pool))
            sums = np.zeros(3)
            for bstart in range(0, len(pool), cfg.batch_size):
                batch = _batch_samples(rng, pool, perm[bstart:bstart + cfg.batch_size], cfg, size)
                x = np.stack([to_chw(im.pixels) for im in batch])
                try:
                    heads = net.forward(x, train=True)
                except FloatingPointError as exc:
                    raise DivergenceError(f"forward pass blew up: {exc}", {"epoch": epoch, "iter": it}) from None
                loss_t, br = compute_loss(net, heads, [im.boxes for im in batch], cfg)
                if not math.isfinite(br.loss_total):
                    raise DivergenceError("loss is not finite",
                                          {"epoch": epoch, "iter": it, **br.as_dict()})
                opt.zero_grad()
                loss_t.backward()
                lr = lr_schedule(it, iters_max, cfg.lr_base)
                try:
                    opt.step(lr)
                except DivergenceError as exc:
                    exc.record.update({"epoch": epoch, "iter": it, **br.as_dict()})
                    raise
                it += 1
                sums += (br.loss_box, br.loss_obj, br.loss_total)
            rec = {"epoch": epoch + 1, "lr": lr, "loss_box": sums[0] / per_epoch,
                   "loss_obj": sums[1] / per_epoch, "loss_total": sums[2] / per_epoch}
            if val_set and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
                try:
                    m = evaluate(net, val_set, cfg)
                except FloatingPointError as exc:
                    raise DivergenceError(f"evaluation blew up: {exc}", rec) from None
                rec.update({k: m[k] for k in ("P", "R", "F1", "mAP")})
            result.history.append(rec)
            log.info("epoch %d %s", epoch + 1, rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return result


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

"""Run configuration: every knob the command line exposes, with defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .arch import HEAD_KINDS, MODELS, PRESETS, NetworkGraph, build_network
from .loss import BOX_CELLS, OBJ_TARGETS
from .metrics import CONF_THRESHOLD, IOU_THRESHOLD, NMS_THRESHOLD
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "yolo-ob"
    bispfpn_layers: int = 1
    head: str = "objectbox"
    preset: str = "reduced"
    mosaic: bool = True
    mosaic_prob: float = 1.0
    box_cells: str = "positives"
    obj_target: str = "assigned"
    class_loss: bool = True
    iou_thr: float = IOU_THRESHOLD
    conf_thr: float = CONF_THRESHOLD
    nms_thr: float = NMS_THRESHOLD
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr_base: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    synthetic_train: int = 512
    synthetic_val: int = 128
    data: str | None = None
    val_data: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.model in MODELS, f"model must be one of {MODELS}"),
            (self.head in HEAD_KINDS, f"head must be one of {HEAD_KINDS}"),
            (self.preset in PRESETS, f"preset must be one of {tuple(PRESETS)}"),
            (self.bispfpn_layers >= 1, "bispfpn_layers must be >= 1"),
            (self.box_cells in BOX_CELLS, f"box_cells must be one of {BOX_CELLS}"),
            (self.obj_target in OBJ_TARGETS, f"obj_target must be one of {OBJ_TARGETS}"),
            (0 < self.iou_thr <= 1, "iou_thr must be in (0, 1]"),
            (0 <= self.conf_thr <= 1, "conf_thr must be in [0, 1]"),
            (0 < self.nms_thr <= 1, "nms_thr must be in (0, 1]"),
            (self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1"),
            (0 <= self.mosaic_prob <= 1, "mosaic_prob must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def architecture(self) -> dict:
        return {"model": self.model, "bispfpn_layers": self.bispfpn_layers, "head": self.head,
                "preset": self.preset}

    def build_graph(self) -> NetworkGraph:
        return build_network(self.model, self.bispfpn_layers, self.head, self.preset)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_base=self.lr_base,
                           momentum=self.momentum, weight_decay=self.weight_decay, preset=self.preset,
                           mosaic=self.mosaic, mosaic_prob=self.mosaic_prob, box_cells=self.box_cells,
                           obj_target=self.obj_target, class_loss=self.class_loss,
                           iou_threshold=self.iou_thr, conf_threshold=self.conf_thr,
                           nms_threshold=self.nms_thr, seed=self.seed)

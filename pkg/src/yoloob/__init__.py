"""Anchor-free polyp detector (DarkNet53 + SPP + BiSPFPN + ObjectBox head) in plain numpy."""

from .arch import Network, build_network, count_multiadds, count_params, summary_table
from .augment import AnnotatedImage, letterbox, mosaic4
from .boxcodec import ScaleSpec, decode, encode, scales_for
from .loss import LossWeights, objectbox_loss, sdiou
from .metrics import average_precision, nms, precision_recall_f1
from .synthetic import SyntheticSceneSpec, gen_synthetic_dataset
from .trainer import TrainConfig, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "LossWeights", "Network", "ScaleSpec", "SyntheticSceneSpec", "TrainConfig",
    "average_precision", "build_network", "count_multiadds", "count_params", "decode", "encode",
    "gen_synthetic_dataset", "letterbox", "lr_schedule", "mosaic4", "nms", "objectbox_loss",
    "precision_recall_f1", "scales_for", "sdiou", "summary_table", "train",
]

"""DPS-Net camouflaged object detection on a from-scratch numpy autodiff core."""

from .blocks import Ablation, DPSNet, NetConfig, Prediction
from .losses import LossReport, total_loss
from .metrics import MetricsReport, evaluate_all
from .synth import Sample, generate_sample, synthetic_dataset
from .tensor import Tensor, no_grad
from .train import TrainConfig

__all__ = [
    "Ablation",
    "DPSNet",
    "LossReport",
    "MetricsReport",
    "NetConfig",
    "Prediction",
    "Sample",
    "Tensor",
    "TrainConfig",
    "evaluate_all",
    "generate_sample",
    "no_grad",
    "synthetic_dataset",
    "total_loss",
]

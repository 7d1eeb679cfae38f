"""Spiking neural network training engine with temporal and spatial
self-distillation, built on a minimal numpy-backed autodiff tape."""

from .losses import DistillConfig, LossBreakdown
from .network import ForwardRecord, NetworkSpec, StageSpec, build_network, forward_timesteps, strip_weak_classifier
from .neurons import LIFConfig, LIFState, lif_step, lif_sequence, spike_backward
from .tensor import ParamSet, ShapeError, Tape, TapeError, Tensor, backward, gradcheck
from .training import MetricsRow, MomentumState, TrainConfig, evaluate, lr_at, sgd_update, train_loop, train_step

__all__ = [
    "DistillConfig", "LossBreakdown", "ForwardRecord", "NetworkSpec", "StageSpec",
    "build_network", "forward_timesteps", "strip_weak_classifier",
    "LIFConfig", "LIFState", "lif_step", "lif_sequence", "spike_backward",
    "ParamSet", "ShapeError", "Tape", "TapeError", "Tensor", "backward", "gradcheck",
    "MetricsRow", "MomentumState", "TrainConfig", "evaluate", "lr_at", "sgd_update",
    "train_loop", "train_step",
]

__version__ = "0.1.0"

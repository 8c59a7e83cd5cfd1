"""Topology-informed keypoint model: network, skeleton, losses and checkpoints."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import ConfigurationError, GroundTruth, LossTerms, LossWeights, loss_total
from .network import ModelConfig, NumericError, Outputs, backward, encode, forward, init_params, param_count

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "GroundTruth",
    "LossTerms",
    "LossWeights",
    "ModelConfig",
    "NumericError",
    "Outputs",
    "backward",
    "encode",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss_total",
    "param_count",
    "save_checkpoint",
]

"""Unsupervised keypoint transporter: networks, transport bottleneck and training."""

from .checkpoint import CheckpointError, load_checkpoint, read_records, save_checkpoint, write_records
from .keypoints import (
    KeypointSet,
    combine_heatmaps,
    normalized_to_pixels,
    reconstruction_loss,
    render_gaussians,
    soft_argmax,
    spatial_softmax,
    transport,
)
from .networks import ConvBlock, FeatureEncoder, KeyNet, NetworkSpec, RefineNet, Transporter, init_weights
from .training import (
    TrainConfig,
    TrainResult,
    infer_keypoint_sets,
    infer_keypoints,
    learning_rate,
    train,
)

__all__ = [
    "CheckpointError",
    "ConvBlock",
    "FeatureEncoder",
    "KeyNet",
    "KeypointSet",
    "NetworkSpec",
    "RefineNet",
    "TrainConfig",
    "TrainResult",
    "Transporter",
    "combine_heatmaps",
    "infer_keypoint_sets",
    "infer_keypoints",
    "init_weights",
    "learning_rate",
    "load_checkpoint",
    "normalized_to_pixels",
    "read_records",
    "reconstruction_loss",
    "render_gaussians",
    "save_checkpoint",
    "soft_argmax",
    "spatial_softmax",
    "train",
    "transport",
    "write_records",
]

"""Cross-modal SAR/optical fusion network for optical reconstruction and flood-water segmentation."""

from .backbone import ModelConfig
from .decoders import FloodFuseNet, ForwardOutput, build_model
from .losses import LossWeights, total_loss
from .tilestore import SceneSpec, TileBundle, read_bundle, synth_scene, write_bundle
from .trainer import TrainConfig, fit

__all__ = [
    "FloodFuseNet",
    "ForwardOutput",
    "LossWeights",
    "ModelConfig",
    "SceneSpec",
    "TileBundle",
    "TrainConfig",
    "build_model",
    "fit",
    "read_bundle",
    "synth_scene",
    "total_loss",
    "write_bundle",
]

__version__ = "0.1.0"

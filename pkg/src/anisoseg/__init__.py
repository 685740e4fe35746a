"""Anisotropic 2.5D segmentation with supervised spatial attention and hardness-weighted Dice loss."""

from .losses import HDLConfig, hardness_weights, hdl, pooled_targets, soft_dice_loss, total_loss
from .network import LayerSchedule, NetworkConfig, Prediction, build_network, receptive_field
from .volume_io import LabelVolume, SegmentationTarget, SyntheticSpec, Volume, generate_case, normalize

__version__ = "0.1.0"

"""Learned compression of dynamic radiance fields on explicit feature grids.

Frames are stored as a coefficient grid times multi-scale basis grids,
trained against multi-view images with a rate-distortion loss, and coded
with a range coder driven by a small per-frame context model.  Frames are
grouped: each group starts with an independently coded frame and the rest
code residuals against the previous decoded frame.
"""

from .codec import CodecError, DecodeBuffer, decode_frame, decode_sequence, encode_frame
from .entropy import DivergenceError, ImplicitEntropyModel
from .estimator import VoxelVideoCodec
from .field import FeatureGrid, FieldFrame, OccupancyGrid
from .metrics import bd_rate, psnr, ssim
from .render import Camera, RenderMLP, render_image
from .scene import MultiViewDataset, SyntheticSceneSpec, default_scene, generate_dataset
from .train import TrainConfig, train_frame, train_sequence

__version__ = "0.1.0"

__all__ = [
    "Camera", "CodecError", "DecodeBuffer", "DivergenceError", "FeatureGrid", "FieldFrame",
    "ImplicitEntropyModel", "MultiViewDataset", "OccupancyGrid", "RenderMLP", "SyntheticSceneSpec",
    "TrainConfig", "VoxelVideoCodec", "bd_rate", "decode_frame", "decode_sequence", "default_scene",
    "encode_frame", "generate_dataset", "psnr", "render_image", "ssim", "train_frame", "train_sequence",
]

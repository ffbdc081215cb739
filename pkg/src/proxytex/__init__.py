"""Textured-proxy neural renderer.

Coarse planar billboards carry learned multi-channel textures generated
from per-instance latent codes; a U-Net composites the rasterized proxy
buffers into a premultiplied-RGBA image. Latent codes and weights are
trained jointly by direct gradient descent, enabling instance
interpolation and few-shot reconstruction of unseen instances.
"""

from .errors import ProxytexError
from .geometry import CameraIntrinsics, Plane, Pose, ProxyMesh, VoxelHull
from .imaging import RgbaImage, RgbImage, composite_over, premultiply
from .model import ModelConfig, ProxyTexModel, RenderOutput, interpolate_latents
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ModelConfig",
    "Plane",
    "Pose",
    "ProxyMesh",
    "ProxyTexModel",
    "ProxytexError",
    "RenderOutput",
    "RgbImage",
    "RgbaImage",
    "TrainConfig",
    "VoxelHull",
    "composite_over",
    "interpolate_latents",
    "load_checkpoint",
    "premultiply",
    "save_checkpoint",
    "train",
    "__version__",
]

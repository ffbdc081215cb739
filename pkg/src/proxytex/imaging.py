"""Image containers, premultiplied-alpha algebra, compositing, and raster I/O.

All images are float arrays with values in [0, 1]. Alpha is stored straight
on disk; conversion to premultiplied color happens in memory. Compositing
uses the Porter-Duff "over" operator in its premultiplied form, which is
linear in both operands. There is no color management and no gamma handling:
synthetic data is generated and consumed in the same linear space.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import (
    ContractViolation,
    MalformedImageError,
    MissingImageError,
    NotRgbaError,
    ShapeMismatchError,
)

# Neutral gray used for composites, losses, and metrics (linear [0, 1]).
NEUTRAL_GRAY = 0.5

_RANGE_TOL = 1e-6


def _check_unit_range(arr: np.ndarray, what: str) -> None:
    if arr.size and (arr.min() < -_RANGE_TOL or arr.max() > 1.0 + _RANGE_TOL):
        raise ValueError(
            f"{what} values must lie in [0, 1]; got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )


@dataclass
class RgbaImage:
    """Color + alpha raster.

    rgb is (H, W, 3), alpha is (H, W), both float in [0, 1]. The
    ``premultiplied`` flag records whether rgb already carries the alpha
    factor. Note that rgb <= alpha is a property of premultiplied images
    originating from straight-alpha sources, not an enforced invariant:
    network outputs are only encouraged toward it by their losses.
    """

    rgb: np.ndarray
    alpha: np.ndarray
    premultiplied: bool = False

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3); got {self.rgb.shape}")
        if self.alpha.shape != self.rgb.shape[:2]:
            raise ShapeMismatchError(
                f"alpha shape {self.alpha.shape} does not match rgb "
                f"{self.rgb.shape[:2]}"
            )
        _check_unit_range(self.rgb, "rgb")
        _check_unit_range(self.alpha, "alpha")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class RgbImage:
    """Opaque color raster, (H, W, 3) float in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3); got {self.rgb.shape}")
        _check_unit_range(self.rgb, "rgb")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


def solid_gray(height: int, width: int, value: float = NEUTRAL_GRAY) -> RgbImage:
    """Constant background image."""
    return RgbImage(np.full((height, width, 3), value, dtype=np.float64))


def premultiply(img: RgbaImage) -> RgbaImage:
    """Multiply color by alpha, marking the result premultiplied.

    Rejects images whose flag is already set; double application would
    silently darken the image.
    """
    if img.premultiplied:
        raise ContractViolation("image is already premultiplied")
    return RgbaImage(
        rgb=img.rgb * img.alpha[..., None],
        alpha=img.alpha.copy(),
        premultiplied=True,
    )


def unpremultiply(img: RgbaImage, eps: float = 1e-4) -> RgbaImage:
    """Inverse of :func:`premultiply` with an epsilon guard on alpha."""
    if not img.premultiplied:
        raise ContractViolation("image is not premultiplied")
    rgb = img.rgb / np.maximum(img.alpha[..., None], eps)
    return RgbaImage(rgb=np.clip(rgb, 0.0, 1.0), alpha=img.alpha.copy(),
                     premultiplied=False)


def composite_over(fg: RgbaImage, bg: RgbImage) -> RgbImage:
    """Porter-Duff "over" with premultiplied foreground color.

    out = fg.rgb + (1 - fg.alpha) * bg.rgb, per pixel. Affine in bg with
    per-pixel coefficient (1 - alpha).
    """
    if not fg.premultiplied:
        raise ContractViolation("foreground must be premultiplied")
    if (fg.height, fg.width) != (bg.height, bg.width):
        raise ShapeMismatchError(
            f"foreground {fg.height}x{fg.width} vs background "
            f"{bg.height}x{bg.width}"
        )
    out = fg.rgb + (1.0 - fg.alpha[..., None]) * bg.rgb
    return RgbImage(np.clip(out, 0.0, 1.0))


def composite_over_gray(fg: RgbaImage, value: float = NEUTRAL_GRAY) -> RgbImage:
    """Composite over a constant neutral-gray background."""
    return composite_over(fg, solid_gray(fg.height, fg.width, value))


def write_image(img: RgbaImage, path: str | os.PathLike, bit_depth: int = 8) -> None:
    """Write a straight-alpha RGBA raster as a lossless 8- or 16-bit PNG."""
    if img.premultiplied:
        raise ContractViolation("disk format is straight alpha; un-premultiply first")
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    scale = 255.0 if bit_depth == 8 else 65535.0
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    rgba = np.concatenate([img.rgb, img.alpha[..., None]], axis=2)
    quantized = np.round(rgba * scale).astype(dtype)
    bgra = quantized[..., [2, 1, 0, 3]]
    if not cv2.imwrite(str(path), bgra):
        raise OSError(f"failed to write image to {path}")


def read_image(path: str | os.PathLike) -> RgbaImage:
    """Read an 8- or 16-bit RGBA raster; returns straight alpha.

    Raises :class:`MissingImageError` for absent files,
    :class:`MalformedImageError` for undecodable content, and
    :class:`NotRgbaError` when the raster is not 4-channel.
    """
    path = str(path)
    if not os.path.exists(path):
        raise MissingImageError(path)
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise MalformedImageError(f"cannot decode image file {path}")
    if data.ndim != 3 or data.shape[2] != 4:
        raise NotRgbaError(
            f"{path}: expected 4-channel RGBA, got shape {data.shape}"
        )
    if data.dtype == np.uint8:
        scale = 255.0
    elif data.dtype == np.uint16:
        scale = 65535.0
    else:
        raise MalformedImageError(f"{path}: unsupported sample type {data.dtype}")
    rgba = data[..., [2, 1, 0, 3]].astype(np.float64) / scale
    return RgbaImage(rgb=rgba[..., :3], alpha=rgba[..., 3], premultiplied=False)

"""Multiscale network inputs: bilinear resize, center-crop ROI pyramid, normalization.

Images are H x W x 3 float32 arrays with values in [0, 1]. Every source image
yields exactly four 224 x 224 x 3 views: the whole image resized, plus three
center square crops at decreasing fractions of the shorter side, each resized.

Resampling convention (fixed so the hand-computed oracles are unambiguous):
pixel centers are aligned, i.e. output pixel i samples the source at
``(i + 0.5) * (src / dst) - 0.5``, clamped to the border. Bilinear output is a
convex combination of the four surrounding source pixels, so values never
leave the per-channel source range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

ROI_SIZE = 224
NUM_LEVELS = 4
DEFAULT_SCALES = (1.0, 0.8, 0.6, 0.4)
MIN_CROP_SIDE = 8

# Channel statistics of the pretraining corpus used by the standard
# torchvision ResNet-50 weights; overridable per config.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def validate_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 array, got shape {getattr(img, 'shape', None)}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"image has empty spatial extent: {img.shape}")
    if not np.isfinite(img).all():
        raise DataError("image contains non-finite values")
    return img


def decode_image(path) -> np.ndarray:
    """Decode an 8-bit raster file to a float32 H x W x 3 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with bilinear interpolation under the pixel-center convention.

    Weights are computed in float64; the result is returned as float32.
    Resizing to the source size is an exact identity.
    """
    validate_image(img)
    if out_h < 1 or out_w < 1:
        raise DataError(f"target dimensions must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]

    def _axis(src: int, dst: int):
        coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        coords = np.clip(coords, 0.0, src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = _axis(h, out_h)
    x0, x1, fx = _axis(w, out_w)

    src = img.astype(np.float64, copy=False)
    top = src[y0[:, None], x0[None, :], :] * (1.0 - fx[None, :, None]) \
        + src[y0[:, None], x1[None, :], :] * fx[None, :, None]
    bot = src[y1[:, None], x0[None, :], :] * (1.0 - fx[None, :, None]) \
        + src[y1[:, None], x1[None, :], :] * fx[None, :, None]
    out = top * (1.0 - fy[:, None, None]) + bot * fy[:, None, None]
    return out.astype(np.float32)


def center_crop_scaled(img: np.ndarray, scale: float) -> np.ndarray:
    """Center square crop of side floor(scale * min(h, w)).

    The offset is floor((extent - side) / 2) on each axis. Returns a view.
    """
    validate_image(img)
    h, w = img.shape[:2]
    side = int(np.floor(scale * min(h, w)))
    if side < MIN_CROP_SIDE:
        raise DataError(
            f"crop side {side} below minimum {MIN_CROP_SIDE} (scale {scale} on {h}x{w})"
        )
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top:top + side, left:left + side, :]


@dataclass(frozen=True)
class RoiPyramid:
    """Exactly four 224 x 224 x 3 views of one source image."""

    levels: tuple[np.ndarray, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS or len(self.scales) != NUM_LEVELS:
            raise DataError(f"pyramid must have exactly {NUM_LEVELS} levels")
        for k, lvl in enumerate(self.levels):
            if lvl.shape != (ROI_SIZE, ROI_SIZE, 3):
                raise DataError(f"level {k} has shape {lvl.shape}, expected "
                                f"({ROI_SIZE}, {ROI_SIZE}, 3)")

    def stacked(self) -> np.ndarray:
        return np.stack(self.levels, axis=0)


def validate_scales(scales) -> tuple[float, ...]:
    scales = tuple(float(s) for s in scales)
    if len(scales) != NUM_LEVELS:
        raise DataError(f"expected {NUM_LEVELS} scales, got {len(scales)}")
    if scales[0] != 1.0:
        raise DataError(f"scales[0] must be 1.0, got {scales[0]}")
    for a, b in zip(scales, scales[1:]):
        if not (0.0 < b < a):
            raise DataError(f"scales must be strictly decreasing within (0, 1]: {scales}")
    return scales


def extract_roi_pyramid(img: np.ndarray, scales=DEFAULT_SCALES) -> RoiPyramid:
    """Build the four fixed-size views: whole-image resize + three ROI crops."""
    scales = validate_scales(scales)
    validate_image(img)
    levels = [bilinear_resize(img, ROI_SIZE, ROI_SIZE)]
    for s in scales[1:]:
        levels.append(bilinear_resize(center_crop_scaled(img, s), ROI_SIZE, ROI_SIZE))
    return RoiPyramid(levels=tuple(levels), scales=scales)


def normalize_channels(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Per-channel (x - mean) / std; the output may leave [0, 1]."""
    validate_image(img)
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 1, 3)
    std = np.asarray(std, dtype=np.float32).reshape(1, 1, 3)
    if (std <= 0).any():
        raise DataError(f"std components must be positive, got {std.ravel().tolist()}")
    return (img - mean) / std

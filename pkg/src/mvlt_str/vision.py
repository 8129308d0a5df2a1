"""
Image-side preprocessing: patchification, patch mask planning and augmentation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError


logger = logging.getLogger(__name__)

CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class ImageSample:
    """An H×W×C image with values in [0, 1] and an optional word label."""

    pixels: np.ndarray
    label: Optional[str] = None
    sample_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ShapeError(f"image pixels must be H×W×C, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.label, self.sample_id)


@dataclass(frozen=True)
class PatchSequence:
    """Row-major sequence of flattened P×P×C patches."""

    patches: np.ndarray
    grid: Tuple[int, int]
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image: ImageSample, patch_size: int) -> PatchSequence:
    height, width, channels = image.pixels.shape
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise ConfigError(f"patch size {patch_size} does not divide image size {height}×{width}")
    rows, cols = height // patch_size, width // patch_size
    patches = (
        image.pixels.reshape(rows, patch_size, cols, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size * patch_size * channels)
    )
    return PatchSequence(patches, (rows, cols), patch_size, channels)


def unpatchify(sequence: PatchSequence, label: Optional[str] = None, sample_id: str = "") -> ImageSample:
    """Exact inverse of ``patchify``; values are not clamped."""
    rows, cols = sequence.grid
    size, channels = sequence.patch_size, sequence.channels
    expected = (rows * cols, size * size * channels)
    if sequence.patches.shape != expected:
        raise ShapeError(f"patch matrix {sequence.patches.shape} does not match grid {rows}×{cols}, expected {expected}")
    pixels = (
        sequence.patches.reshape(rows, cols, size, size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * size, cols * size, channels)
    )
    return ImageSample(pixels, label, sample_id)


def patchify_batch(images: Sequence[ImageSample], patch_size: int) -> np.ndarray:
    """Stack patch matrices into a (B, N, P²·C) array."""
    return np.stack([patchify(image, patch_size).patches for image in images])


def mask_count(n: int, ratio: float) -> int:
    """``round(ratio * n)`` with ties rounding up."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    return min(n, int(math.floor(ratio * n + 0.5)))


@dataclass(frozen=True)
class PatchMaskPlan:
    """
    Partition of patch indices into masked and unmasked sets.

    ``sample_patch_mask`` produces both sets sorted; ``unmasked`` may be
    listed in any order, and that order is the order the encoder sees.
    """

    masked: np.ndarray
    unmasked: np.ndarray
    ratio: float

    def __post_init__(self):
        total = self.masked.size + self.unmasked.size
        union = np.concatenate([self.masked, self.unmasked])
        if np.unique(union).size != total or (total and (union.min() < 0 or union.max() >= total)):
            raise ShapeError(f"patch mask plan is not a partition of 0..{total - 1}")

    @property
    def num_patches(self) -> int:
        return int(self.masked.size + self.unmasked.size)

    @classmethod
    def empty(cls, num_patches: int) -> "PatchMaskPlan":
        return cls(np.arange(0, dtype=np.int64), np.arange(num_patches, dtype=np.int64), 0.0)


def sample_patch_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> PatchMaskPlan:
    count = mask_count(num_patches, ratio)
    order = rng.permutation(num_patches)
    return PatchMaskPlan(np.sort(order[:count]), np.sort(order[count:]), ratio)


def _resample(pixels: np.ndarray, top: float, left: float, crop_h: float, crop_w: float,
              out_h: int, out_w: int) -> np.ndarray:
    # Half-pixel centres; edge pixels extend outward.
    ys = top + (np.arange(out_h) + 0.5) * (crop_h / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (crop_w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    channels = [
        ndimage.map_coordinates(pixels[..., c], [grid_y, grid_x], order=1, mode="nearest")
        for c in range(pixels.shape[2])
    ]
    return np.stack(channels, axis=-1)


def random_resized_crop(image: ImageSample, rng: np.random.Generator,
                        scale: Tuple[float, float] = (0.85, 1.0),
                        aspect: Tuple[float, float] = (3.5, 5.0)) -> ImageSample:
    """
    Crop a random region and resize it back to the input size.

    The area fraction is drawn uniformly from ``scale`` and the width/height
    ratio log-uniformly from ``aspect``. After ``CROP_ATTEMPTS`` draws that do
    not fit, a centre crop with the nearest admissible ratio is used.
    """
    height, width = image.height, image.width
    if height < 2 or width < 2:
        raise ShapeError(f"image must be at least 2×2 to crop, got {height}×{width}")
    area = height * width
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])

    for _ in range(CROP_ATTEMPTS):
        target_area = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        crop_w = int(round(math.sqrt(target_area * ratio)))
        crop_h = int(round(math.sqrt(target_area / ratio)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = int(rng.integers(0, height - crop_h + 1))
            left = int(rng.integers(0, width - crop_w + 1))
            break
    else:
        in_ratio = width / height
        if in_ratio < aspect[0]:
            crop_w, crop_h = width, int(round(width / aspect[0]))
        elif in_ratio > aspect[1]:
            crop_h, crop_w = height, int(round(height * aspect[1]))
        else:
            crop_w, crop_h = width, height
        top, left = (height - crop_h) // 2, (width - crop_w) // 2

    pixels = _resample(image.pixels, top, left, crop_h, crop_w, height, width)
    return image.with_pixels(np.clip(pixels, 0.0, 1.0))


def random_rotation(image: ImageSample, rng: np.random.Generator, max_degrees: float = 10.0) -> ImageSample:
    """Rotate about the centre by an angle drawn from [-max_degrees, max_degrees]."""
    angle = rng.uniform(-max_degrees, max_degrees)
    rotated = ndimage.rotate(image.pixels, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    return image.with_pixels(np.clip(rotated, 0.0, 1.0))

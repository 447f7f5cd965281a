"""Weak and strong augmentation with deterministic, keyed random streams.

Weak augmentation is a horizontal flip with probability 0.5 and is the only
geometric transform anywhere in the pipeline; strong augmentation is purely
photometric (jitter, grayscale, blur, cutout) so boxes computed on the weak
view stay valid on the strong view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import OrientedBox
from .imageops import hsv_to_rgb, luma, rgb_to_hsv, rng_stream

__all__ = [
    "AugmentConfig",
    "AugmentedPair",
    "augment_pair",
    "flip_horizontal",
    "weak_augment",
    "strong_augment",
    "gaussian_blur",
    "rng_stream",
]


@dataclass(frozen=True)
class AugmentConfig:
    """Strong-augmentation probabilities and ranges (common mean-teacher recipe)."""

    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    cutout_prob: float = 0.7
    cutout_count: tuple[int, int] = (1, 5)
    cutout_max_frac: float = 0.2
    cutout_fill: tuple[float, float, float] | None = None  # None -> mean of the incoming image


@dataclass(frozen=True)
class AugmentedPair:
    """Weak and strong views of one source image, from one keyed seed stream.

    The boxes are the weak view's geometry; the strong view is photometric
    only, so they are valid for it too.
    """

    weak_image: np.ndarray
    strong_image: np.ndarray
    weak_boxes: list[OrientedBox]
    seed: int


def augment_pair(image: np.ndarray, boxes, seed: int, image_id,
                 cfg: "AugmentConfig | None" = None) -> AugmentedPair:
    """Produce the teacher's weak view and the student's strong view of an image."""
    cfg = cfg if cfg is not None else AugmentConfig()
    weak_img, weak_boxes = weak_augment(image, boxes, rng_stream(seed, "weak", image_id))
    strong_img = strong_augment(weak_img, rng_stream(seed, "strong", image_id), cfg)
    return AugmentedPair(weak_image=weak_img, strong_image=strong_img,
                         weak_boxes=weak_boxes, seed=seed)


def flip_horizontal(image: np.ndarray, boxes, width: float | None = None):
    """Mirror the image about its vertical center line and transform boxes to match."""
    if width is None:
        width = image.shape[1]
    flipped = image[:, ::-1].copy()
    out_boxes = [
        OrientedBox(width - b.cx, b.cy, b.w, b.h, -b.theta) for b in boxes
    ]
    return flipped, out_boxes


def weak_augment(image: np.ndarray, boxes, rng: np.random.Generator):
    """Horizontal flip with probability 0.5; otherwise identity on image and boxes."""
    if rng.random() < 0.5:
        return flip_horizontal(image, boxes)
    return image.copy(), list(boxes)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable truncated Gaussian blur (radius ceil(3*sigma), reflect padding)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    work = np.asarray(image, dtype=np.float64)
    # 'mirror' matches numpy.pad reflect: the edge sample is not repeated
    work = ndimage.convolve1d(work, kernel, axis=0, mode="mirror")
    work = ndimage.convolve1d(work, kernel, axis=1, mode="mirror")
    return work.astype(image.dtype, copy=False)


def blur_kernel(sigma: float) -> np.ndarray:
    """The 1-D kernel gaussian_blur convolves with; exposed for verification."""
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    return kernel / kernel.sum()


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = luma(image).mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = luma(image)[:, :, None]
    return np.clip(gray + (image - gray) * factor, 0.0, 1.0)


def adjust_hue(image: np.ndarray, delta: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
    return hsv_to_rgb(hsv)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    return np.repeat(luma(image)[:, :, None], 3, axis=2)


def strong_augment(image: np.ndarray, rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Photometric-only strong augmentation; image geometry is never altered.

    Fixed op and draw order: color jitter (brightness, contrast, saturation,
    hue), grayscale, Gaussian blur, cutout. Each op flips its own coin first
    and draws its parameters only when the coin hits.
    """
    dtype = image.dtype
    out = np.asarray(image, dtype=np.float64).copy()
    if rng.random() < cfg.jitter_prob:
        factors = [
            rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness),
            rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast),
            rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation),
            rng.uniform(-cfg.hue, cfg.hue),
        ]
        out = adjust_brightness(out, factors[0])
        out = adjust_contrast(out, factors[1])
        out = adjust_saturation(out, factors[2])
        out = adjust_hue(out, factors[3])
    if rng.random() < cfg.grayscale_prob:
        out = to_grayscale(out)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = gaussian_blur(out, sigma)
    if rng.random() < cfg.cutout_prob:
        out = cutout(out, rng, cfg)
    return out.astype(dtype, copy=False)


def cutout(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Fill 1-5 random rectangles (each side <= cutout_max_frac of its image side)."""
    h, w = image.shape[:2]
    out = image.copy()
    if cfg.cutout_fill is not None:
        fill = np.asarray(cfg.cutout_fill, dtype=np.float64)
    else:
        fill = image.mean(axis=(0, 1))
    count = int(rng.integers(cfg.cutout_count[0], cfg.cutout_count[1] + 1))
    for _ in range(count):
        cw = int(rng.integers(1, max(2, int(cfg.cutout_max_frac * w)) + 1))
        ch = int(rng.integers(1, max(2, int(cfg.cutout_max_frac * h)) + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        out[y0:y0 + ch, x0:x0 + cw] = fill
    return out

"""Shared low-level image helpers: color-space conversion, resizing, noise layers, file I/O."""

from __future__ import annotations

import hashlib
import math

import numpy as np
from PIL import Image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent counter-based random stream keyed by (seed, tags).

    The key is derived by hashing the seed together with the tag tuple, so
    streams for different purposes/images/steps never collide and the whole
    pipeline is reproducible from a single global seed.
    """
    raw = "|".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.blake2s(raw.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an RGB image (H,W,3) -> (H,W)."""
    return img @ LUMA_WEIGHTS


def ensure_rgb(img: np.ndarray) -> np.ndarray:
    """Promote grayscale (H,W) or (H,W,1) input to (H,W,3)."""
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim == 3 and img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    if img.ndim == 3 and img.shape[2] == 3:
        return img
    raise ValueError(f"expected (H,W), (H,W,1) or (H,W,3) image, got shape {img.shape}")


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0,1]."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = np.max(img, axis=-1)
    minc = np.min(img, axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-20), 0.0)
    dz = np.maximum(delta, 1e-20)
    rc = (maxc - r) / dz
    gc = (maxc - g) / dz
    bc = (maxc - b) / dz
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, all channels in [0,1]."""
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling; identity when sizes match."""
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    if (out_h, out_w) == (h, w):
        return img.copy()
    src_y = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    src_y = np.clip(src_y, 0.0, h - 1.0)
    src_x = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0).reshape(-1, 1)
    wx = (src_x - x0).reshape(1, -1)
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(img.dtype, copy=False)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with centered sampling: src = floor((i + 0.5) * in/out).

    Centered sampling keeps the down/up displacement symmetric, so pixelation
    error grows monotonically with block size (a floor/top-left convention
    does not).
    """
    h, w = img.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[ys][:, xs].copy()


def value_noise(h: int, w: int, rng: np.random.Generator, octaves: int = 4,
                base_cells: int = 4, persistence: float = 0.5) -> np.ndarray:
    """Fractal value noise in [0,1]: bilinear-upsampled random lattices summed over octaves."""
    acc = np.zeros((h, w))
    amp = 1.0
    cells = base_cells
    for _ in range(octaves):
        grid = rng.random((min(cells, h), min(cells, w)))
        acc += amp * resize_bilinear(grid, h, w)
        amp *= persistence
        cells *= 2
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / max(hi - lo, 1e-12)


def diamond_square(map_size: int, rng: np.random.Generator, wibble_decay: float = 2.0) -> np.ndarray:
    """Plasma fractal on a (2^k+1) square grid via diamond-square, normalized to [0,1]."""
    size = 1
    while size + 1 < map_size:
        size *= 2
    n = size + 1
    arr = np.zeros((n, n))
    arr[0, 0] = arr[0, -1] = arr[-1, 0] = arr[-1, -1] = rng.random()
    step = size
    wibble = 1.0
    while step > 1:
        half = step // 2
        # diamond step
        for y in range(half, n, step):
            for x in range(half, n, step):
                avg = (arr[y - half, x - half] + arr[y - half, x + half]
                       + arr[y + half, x - half] + arr[y + half, x + half]) / 4.0
                arr[y, x] = avg + wibble * (rng.random() - 0.5)
        # square step
        for y in range(0, n, half):
            shift = half if (y // half) % 2 == 0 else 0
            for x in range(shift, n, step):
                if shift == 0 and x % step == 0:
                    continue
                total, count = 0.0, 0
                for dy, dx in ((-half, 0), (half, 0), (0, -half), (0, half)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < n and 0 <= xx < n:
                        total += arr[yy, xx]
                        count += 1
                arr[y, x] = total / count + wibble * (rng.random() - 0.5)
        step = half
        wibble /= wibble_decay
    lo, hi = arr.min(), arr.max()
    return (arr - lo) / max(hi - lo, 1e-12)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def load_image(path) -> np.ndarray:
    """Load an image file as float32 RGB in [0,1]."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_image_png(path, img: np.ndarray) -> None:
    """Quantize to 8 bit and write a PNG."""
    Image.fromarray(to_uint8(ensure_rgb(img))).save(path, format="PNG")

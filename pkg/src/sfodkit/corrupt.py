"""Corruption-dataset generation: the common-corruption kinds plus a cloud composite.

All corruptions operate on float32 RGB images in [0,1], are deterministic
given (image, spec), and never move pixels' labels (annotations pass through
untouched). Severity constants live in data/severity_table.json; frost and
cloudy are procedural textures rather than photographic overlays.
"""

from __future__ import annotations

import hashlib
import io
import json
import shutil
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .augment import gaussian_blur
from .imageops import (
    diamond_square,
    ensure_rgb,
    from_uint8,
    hsv_to_rgb,
    luma,
    resize_bilinear,
    resize_nearest,
    rgb_to_hsv,
    rng_stream,
    to_uint8,
    value_noise,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
ANNOTATION_SUFFIXES = {".txt"}


def _load_severity_table() -> dict:
    payload = resources.files("sfodkit").joinpath("data/severity_table.json").read_text()
    return json.loads(payload)


_TABLE = _load_severity_table()
KINDS = tuple(_TABLE["kinds"].keys())
SEVERITY_TABLE_VERSION = _TABLE["version"]


def severity_params(kind: str, severity: int) -> dict:
    """Parameter dict for one (kind, severity); severity is 1-based."""
    if kind not in _TABLE["kinds"]:
        raise ValueError(f"unknown corruption kind {kind!r}; known: {', '.join(KINDS)}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in [1,5], got {severity}")
    return {k: v[severity - 1] for k, v in _TABLE["kinds"][kind].items()}


@dataclass(frozen=True)
class CorruptionSpec:
    """Fully determines a corrupted image: kind, severity 1-5, and RNG seed."""

    kind: str
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        severity_params(self.kind, self.severity)  # validates both fields


# ---------------------------------------------------------------------------
# individual corruptions (x: float64 HxWx3 in [0,1] working copies)

def _gaussian_noise(x, p, rng):
    return x + rng.normal(0.0, p["sigma"], x.shape)


def _shot_noise(x, p, rng):
    c = p["photons"]
    return rng.poisson(np.clip(x, 0, 1) * c) / c


def _impulse_noise(x, p, rng):
    out = x.copy()
    u = rng.random(x.shape[:2])
    amount = p["amount"]
    out[u < amount / 2] = 0.0
    out[u > 1 - amount / 2] = 1.0
    return out


def _speckle_noise(x, p, rng):
    return x + x * rng.normal(0.0, p["sigma"], x.shape)


def _disk_kernel(radius: int, alias_sigma: float) -> np.ndarray:
    grid = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    kernel = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    if alias_sigma > 0:
        kernel = gaussian_blur(kernel, alias_sigma)
    return kernel / kernel.sum()


def _convolve2d(x, kernel):
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[:, :, c] = ndimage.convolve(x[:, :, c], kernel, mode="mirror")
    return out


def _defocus_blur(x, p, rng):
    return _convolve2d(x, _disk_kernel(int(p["radius"]), p["alias_sigma"]))


def _glass_blur(x, p, rng):
    h, w = x.shape[:2]
    delta = int(p["max_delta"])
    out = x
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(int(p["iterations"])):
        dy = rng.integers(-delta, delta + 1, size=(h, w))
        dx = rng.integers(-delta, delta + 1, size=(h, w))
        yy = np.clip(ys + dy, 0, h - 1)
        xx = np.clip(xs + dx, 0, w - 1)
        out = out[yy, xx]
    return gaussian_blur(out, p["sigma"])


def _line_kernel(length: int, sigma: float, angle: float) -> np.ndarray:
    radius = max(1, length // 2)
    size = 2 * radius + 1
    kernel = np.zeros((size, size))
    ts = np.linspace(-radius, radius, 2 * size)
    weights = np.exp(-0.5 * (ts / max(sigma, 1e-6)) ** 2)
    for t, wgt in zip(ts, weights):
        yy = int(round(radius + t * np.sin(angle)))
        xx = int(round(radius + t * np.cos(angle)))
        if 0 <= yy < size and 0 <= xx < size:
            kernel[yy, xx] += wgt
    return kernel / kernel.sum()


def _motion_blur(x, p, rng):
    side = min(x.shape[:2])
    length = max(3, int(round(p["length_frac"] * side)))
    sigma = max(1.0, p["sigma_frac"] * side)
    angle = rng.uniform(-np.pi / 4, np.pi / 4)
    return _convolve2d(x, _line_kernel(length, sigma, angle))


def _clipped_zoom(x, factor):
    h, w = x.shape[:2]
    ch, cw = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = x[top:top + ch, left:left + cw]
    return resize_bilinear(crop, h, w)


def _zoom_blur(x, p, rng):
    factors = np.arange(1.0 + p["step"], p["max_zoom"] + 1e-9, p["step"])
    acc = x.copy()
    for f in factors:
        acc += _clipped_zoom(x, f)
    return acc / (len(factors) + 1.0)


def _gaussian_blur_kind(x, p, rng):
    return gaussian_blur(x, p["sigma"])


def _top_quantile_mask(layer: np.ndarray, coverage: float) -> np.ndarray:
    thr = np.quantile(layer, 1.0 - coverage)
    return layer > thr


def _snow(x, p, rng):
    h, w = x.shape[:2]
    layer = rng.normal(0.5, 0.3, size=(h, w))
    layer = _clipped_zoom(layer[:, :, None], p["zoom"])[:, :, 0]
    flakes = np.where(_top_quantile_mask(layer, p["coverage"]), layer, 0.0)
    angle = rng.uniform(-3 * np.pi / 4, -np.pi / 4)
    kernel = _line_kernel(max(3, int(0.08 * min(h, w))), 0.03 * min(h, w), angle)
    flakes = ndimage.convolve(flakes, kernel, mode="mirror") * p["flake_gain"] * 4.0
    gray_lift = np.maximum(x, luma(x)[:, :, None] * 1.5 + 0.5)
    whitened = p["blend"] * x + (1.0 - p["blend"]) * gray_lift
    return whitened + flakes[:, :, None] + np.rot90(flakes, 2)[:, :, None]


def _frost(x, p, rng):
    h, w = x.shape[:2]
    texture = value_noise(h, w, rng, octaves=5, base_cells=6)
    crystals = texture ** 2  # sparsify: bright crystalline streaks on dark ground
    frost_layer = np.repeat(crystals[:, :, None], 3, axis=2)
    return p["image_scale"] * x + p["frost_scale"] * frost_layer


def _fog(x, p, rng):
    h, w = x.shape[:2]
    max_val = x.max()
    plasma = diamond_square(max(h, w), rng, wibble_decay=p["wibble_decay"])[:h, :w]
    out = x + p["intensity"] * plasma[:, :, None]
    return out * max_val / (max_val + p["intensity"])


def _brightness(x, p, rng):
    hsv = rgb_to_hsv(np.clip(x, 0, 1))
    hsv[..., 2] = np.clip(hsv[..., 2] + p["delta"], 0, 1)
    return hsv_to_rgb(hsv)


def _spatter(x, p, rng):
    h, w = x.shape[:2]
    layer = gaussian_blur(rng.normal(0.5, 0.3, size=(h, w)), p["sigma"])
    mask = _top_quantile_mask(layer, p["coverage"]).astype(np.float64)
    mask = gaussian_blur(mask, 0.8) * p["strength"]
    if p["mode"] == "water":
        color = np.array([0.65, 0.75, 0.93])
    else:
        color = np.array([0.25, 0.16, 0.08])
    return x * (1.0 - mask[:, :, None]) + mask[:, :, None] * color


def _contrast(x, p, rng):
    mean = x.mean(axis=(0, 1), keepdims=True)
    return (x - mean) * p["scale"] + mean


def _elastic(x, p, rng):
    h, w = x.shape[:2]
    side = min(h, w)
    alpha = p["alpha_frac"] * side
    sigma = max(1.0, p["sigma_frac"] * side)
    def field():
        raw = gaussian_blur(rng.uniform(-1.0, 1.0, size=(h, w)), sigma)
        peak = np.abs(raw).max()
        return alpha * raw / max(peak, 1e-12)
    dy, dx = field(), field()
    ys, xs = np.mgrid[0:h, 0:w]
    coords = [np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1)]
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(x[:, :, c], coords, order=1, mode="mirror")
    return out


def _pixelate(x, p, rng):
    h, w = x.shape[:2]
    dh, dw = max(1, int(h * p["fraction"])), max(1, int(w * p["fraction"]))
    return resize_nearest(resize_nearest(x, dh, dw), h, w)


def _jpeg(x, p, rng):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(x)).save(buf, format="JPEG", quality=int(p["quality"]))
    buf.seek(0)
    with Image.open(buf) as im:
        return from_uint8(np.asarray(im.convert("RGB"))).astype(np.float64)


def _saturate(x, p, rng):
    hsv = rgb_to_hsv(np.clip(x, 0, 1))
    hsv[..., 1] = np.clip(hsv[..., 1] * p["gain"] + p["offset"], 0, 1)
    return hsv_to_rgb(hsv)


def _cloudy(x, p, rng):
    h, w = x.shape[:2]
    clouds = value_noise(h, w, rng, octaves=4, base_cells=3)
    # soft coverage ramp: fully clear below the band, fully cloudy above it
    lo = np.quantile(clouds, 1.0 - p["coverage"])
    band = 0.15
    mask = np.clip((clouds - lo) / band, 0.0, 1.0) * p["opacity"]
    cloud_color = 0.82 + 0.18 * clouds
    return x * (1.0 - mask[:, :, None]) + (mask * cloud_color)[:, :, None]


_CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "speckle_noise": _speckle_noise,
    "defocus_blur": _defocus_blur,
    "glass_blur": _glass_blur,
    "motion_blur": _motion_blur,
    "zoom_blur": _zoom_blur,
    "gaussian_blur": _gaussian_blur_kind,
    "snow": _snow,
    "frost": _frost,
    "fog": _fog,
    "brightness": _brightness,
    "spatter": _spatter,
    "contrast": _contrast,
    "elastic": _elastic,
    "pixelate": _pixelate,
    "jpeg": _jpeg,
    "saturate": _saturate,
    "cloudy": _cloudy,
}

NOISE_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise", "speckle_noise")
BLUR_KINDS = ("defocus_blur", "glass_blur", "motion_blur", "zoom_blur", "gaussian_blur")
WEATHER_KINDS = ("snow", "frost", "fog", "brightness", "spatter")
DIGITAL_KINDS = ("contrast", "elastic", "pixelate", "jpeg", "saturate")


def corrupt_image(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; deterministic given (image, spec), output clipped to [0,1]."""
    work = ensure_rgb(np.asarray(image))
    dtype = np.float32 if work.dtype != np.float64 else np.float64
    work = work.astype(np.float64)
    params = severity_params(spec.kind, spec.severity)
    # keyed by (seed, kind) only: severities share the random field, so a
    # stronger parameter set degrades the very same pixels strictly more
    rng = rng_stream(spec.seed, "corrupt", spec.kind)
    out = _CORRUPTIONS[spec.kind](work, params, rng)
    return np.clip(out, 0.0, 1.0).astype(dtype)


# ---------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the destination root
    kind: str
    severity: int
    seed: int
    sha256: str  # hex digest, or "FAILED" when the source was unreadable


def file_seed(global_seed: int, rel_path: str, kind: str) -> int:
    """Stable per-file seed so datasets are reproducible file-by-file."""
    digest = hashlib.sha256(f"{global_seed}|{rel_path}|{kind}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, entries: list[ManifestEntry]) -> None:
    lines = [
        f"{e.path}\t{e.kind}\t{e.severity}\t{e.seed}\t{e.sha256}"
        for e in sorted(entries, key=lambda e: e.path)
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: Path) -> list[ManifestEntry]:
    entries = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{line_no}: expected 5 tab-separated fields")
        entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), int(parts[3]), parts[4]))
    return entries


def generate_dataset(src_dir, dst_dir, kinds: list[str], severity: int = 3,
                     seed: int = 0) -> list[ManifestEntry]:
    """Corrupt every image in src_dir once per kind; copy annotations verbatim.

    Writes dst/<kind>/<stem>.png per image plus byte-identical copies of any
    .txt annotation files, and dst/manifest.tsv listing every output with its
    checksum. Unreadable images are recorded as FAILED and skipped.
    """
    from .imageops import load_image, save_image_png

    src = Path(src_dir)
    dst = Path(dst_dir)
    dst.mkdir(parents=True, exist_ok=True)
    for kind in kinds:
        severity_params(kind, severity)
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    annotations = sorted(p for p in src.iterdir() if p.suffix.lower() in ANNOTATION_SUFFIXES)
    entries: list[ManifestEntry] = []
    for kind in kinds:
        kind_dir = dst / kind
        kind_dir.mkdir(parents=True, exist_ok=True)
        for img_path in images:
            rel = img_path.name
            per_file_seed = file_seed(seed, rel, kind)
            out_path = kind_dir / (img_path.stem + ".png")
            rel_out = f"{kind}/{out_path.name}"
            try:
                image = load_image(img_path)
            except Exception:
                entries.append(ManifestEntry(rel_out, kind, severity, per_file_seed, "FAILED"))
                continue
            corrupted = corrupt_image(image, CorruptionSpec(kind, severity, per_file_seed))
            save_image_png(out_path, corrupted)
            entries.append(ManifestEntry(rel_out, kind, severity, per_file_seed, _sha256(out_path)))
        for ann_path in annotations:
            out_ann = kind_dir / ann_path.name
            shutil.copyfile(ann_path, out_ann)
            entries.append(ManifestEntry(
                f"{kind}/{ann_path.name}", kind, severity, seed, _sha256(out_ann)
            ))
    write_manifest(dst / "manifest.tsv", entries)
    return sorted(entries, key=lambda e: e.path)

"""Image buffers, quality metrics and a procedural rain-degradation corpus.

Pixels are float64 in [0, 1], stored as ``(height, width, channels)``. PNG
files are 8-bit with values quantized by ``round(p * 255)``.
"""

from __future__ import annotations

import io
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

RAIN_TYPES = ("DRS", "DRD", "NRS", "NRD")


class ImageBuffer:
    """An H x W x C image with values clamped to [0, 1]."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected an HxWxC array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        self.pixels = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"ImageBuffer({self.height}x{self.width}x{self.channels})"

    @classmethod
    def constant(cls, value: float, height: int, width: int, channels: int = 3) -> ImageBuffer:
        return cls(np.full((height, width, channels), value))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def to_png_bytes(self) -> bytes:
        arr = self.to_uint8()
        img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
        buf = io.BytesIO()
        # fixed settings keep the encoded bytes deterministic
        img.save(buf, format="PNG", optimize=False, compress_level=6)
        return buf.getvalue()

    @classmethod
    def from_png_bytes(cls, data: bytes) -> ImageBuffer:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
        return cls(arr)

    def save_png(self, path) -> None:
        Path(path).write_bytes(self.to_png_bytes())

    @classmethod
    def load(cls, path) -> ImageBuffer:
        return cls.from_png_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and positive, got {self.window_size}")
        if min(self.gaussian_sigma, self.k1, self.k2, self.dynamic_range) <= 0:
            raise ValueError("SSIM constants must be positive")


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the two leading axes, no padding
    rows = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _check_same_shape(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def ssim_map(a: ImageBuffer, b: ImageBuffer, params: SsimParams = SsimParams()) -> np.ndarray:
    """Per-window SSIM values, shape ``(H - w + 1, W - w + 1, C)``."""
    _check_same_shape(a, b)
    w = params.window_size
    if a.height < w or a.width < w:
        raise ValueError(f"image {a.height}x{a.width} smaller than the {w}x{w} SSIM window")
    g = gaussian_kernel_1d(w, params.gaussian_sigma)
    x, y = a.pixels, b.pixels
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a: ImageBuffer, b: ImageBuffer, params: SsimParams = SsimParams()) -> float:
    """Mean structural similarity over fully-contained Gaussian windows.

    Channels are scored independently and averaged.
    """
    return float(ssim_map(a, b, params).mean(axis=(0, 1)).mean())


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """PSNR in dB for a peak value of 1.0; ``inf`` for identical images."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def resize_bilinear(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    """Bilinear resize with half-pixel centers and edge clamping."""
    if (img.height, img.width) == (height, width):
        return img

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, img.height)
    x0, x1, fx = coords(width, img.width)
    p = img.pixels
    top = p[y0][:, x0] * (1 - fx)[None, :, None] + p[y0][:, x1] * fx[None, :, None]
    bot = p[y1][:, x0] * (1 - fx)[None, :, None] + p[y1][:, x1] * fx[None, :, None]
    return ImageBuffer(top * (1 - fy)[:, None, None] + bot * fy[:, None, None])


# ---------------------------------------------------------------------------
# procedural scenes and degradations
# ---------------------------------------------------------------------------


def synth_clean(rng_seed: int, size: int = 32) -> ImageBuffer:
    """Smooth colour gradients overlaid with a few flat geometric shapes."""
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, base = rng.uniform(-0.4, 0.4, 3)
        freq, phase = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[:, :, c] = 0.5 + base * 0.5 + a * xx + b * yy + 0.1 * np.sin(freq * np.pi * (xx + yy) + phase)
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size * 0.08, size * 0.3)
        if rng.random() < 0.5:
            mask = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy * (size - 1) - cy) <= r) & (np.abs(xx * (size - 1) - cx) <= r * rng.uniform(0.4, 1.0))
        img[mask] = color
    return ImageBuffer(img)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    intensity: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in RAIN_TYPES:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {RAIN_TYPES}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in (0, 1], got {self.intensity}")


def _box_blur(p: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    padded = np.pad(p, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    c = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    h, w = p.shape[:2]
    return (c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]) / (k * k)


def _streak_layer(rng, h, w, count, angle, length) -> np.ndarray:
    """Anti-aliased line segments at a common angle, values in [0, 1]."""
    layer = np.zeros((h, w))
    if count == 0:
        return layer
    starts = rng.uniform([0, 0], [h, w], size=(count, 2))
    lengths = length * rng.uniform(0.6, 1.4, count)
    t = np.linspace(0.0, 1.0, int(4 * length) + 2)
    dy, dx = np.cos(angle), np.sin(angle)
    ys = (starts[:, :1] + t[None, :] * lengths[:, None] * dy).ravel()
    xs = (starts[:, 1:] + t[None, :] * lengths[:, None] * dx).ravel()
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        np.add.at(layer, (yi[ok], xi[ok]), wgt[ok])
    return np.clip(layer, 0.0, 1.0)


def _disk_mask(rng, h, w, count, r_lo, r_hi) -> np.ndarray:
    mask = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(r_lo, r_hi)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.maximum(mask, np.clip((r - d) / max(r * 0.5, 1.0) + 0.5, 0.0, 1.0))
    return mask


def _add_streaks(p, rng, intensity, scale):
    h, w = p.shape[:2]
    count = round(intensity * 24 * scale)
    angle = rng.uniform(-0.35, 0.35)
    layer = _streak_layer(rng, h, w, count, angle, length=max(h, w) * 0.25)
    opacity = 0.35 + 0.45 * intensity
    return p + opacity * layer[:, :, None]


def _add_drops(p, rng, intensity, scale):
    h, w = p.shape[:2]
    count = round(intensity * 10 * scale)
    m = _disk_mask(rng, h, w, count, max(h, w) * 0.06, max(h, w) * 0.16)[:, :, None]
    blurred = _box_blur(p, 2)
    haze = 0.25 + 0.5 * blurred
    return (1 - m) * p + m * (0.4 * blurred + 0.6 * haze)


def degrade(clean: ImageBuffer, spec: DegradationSpec) -> ImageBuffer:
    """Apply one procedural rain recipe.

    DRS adds bright streaks, DRD pastes blurred soft-edged drops, NRS darkens
    then streaks, NRD darkens, adds drops and warm glow spots. The night
    darkening factor is ``1 - 0.6 * intensity`` (0.4x at full intensity), so
    every recipe reduces to the identity as intensity goes to zero.
    """
    rng = np.random.default_rng(spec.rng_seed)
    p = clean.pixels.copy()
    scale = clean.height * clean.width / 1024.0
    i = spec.intensity
    if spec.kind in ("NRS", "NRD"):
        p = p * (1.0 - 0.6 * i)
    if spec.kind in ("DRS", "NRS"):
        p = _add_streaks(p, rng, i, scale)
    else:
        p = _add_drops(p, rng, i, scale)
    if spec.kind == "NRD":
        h, w = p.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        glow = np.zeros((h, w))
        for _ in range(round(i * 4 * scale)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(1.5, 4.0)
            glow += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        p = p + 0.5 * i * glow[:, :, None] * np.array([1.0, 0.8, 0.5])
    return ImageBuffer(p)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    counts: Mapping[str, int] = field(default_factory=lambda: {t: 8 for t in RAIN_TYPES})
    size: int = 32
    base_seed: int = 0
    intensity_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        unknown = set(self.counts) - set(RAIN_TYPES)
        if unknown:
            raise ValueError(f"unknown rain types in counts: {sorted(unknown)}")
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("per-type counts must be non-negative")
        lo, hi = self.intensity_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"intensity_range must satisfy 0 < lo <= hi <= 1, got {self.intensity_range}")
        if self.size < 4:
            raise ValueError("image size must be at least 4")


def iter_corpus(config: CorpusConfig) -> Iterable[tuple[dict, ImageBuffer, ImageBuffer]]:
    """Yield ``(entry, clean, degraded)`` with ``seed = base_seed + index``."""
    index = 0
    for kind in RAIN_TYPES:
        for _ in range(config.counts.get(kind, 0)):
            seed = config.base_seed + index
            clean = synth_clean(seed, config.size)
            lo, hi = config.intensity_range
            intensity = float(np.random.default_rng([seed, 1]).uniform(lo, hi))
            degraded = degrade(clean, DegradationSpec(kind, intensity, seed))
            yield {"id": f"{kind.lower()}_{index:06d}", "type": kind, "seed": seed}, clean, degraded
            index += 1


def corpus_arrays(config: CorpusConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """In-memory corpus: clean and degraded as (N, C, H, W) plus type indices."""
    clean, degraded, types = [], [], []
    for entry, c, d in iter_corpus(config):
        clean.append(c.pixels.transpose(2, 0, 1))
        degraded.append(d.pixels.transpose(2, 0, 1))
        types.append(RAIN_TYPES.index(entry["type"]))
    return np.stack(clean), np.stack(degraded), np.asarray(types)


def gen_corpus(config: CorpusConfig, out_dir) -> list[dict]:
    """Write paired PNGs and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "clean").mkdir(parents=True, exist_ok=True)
        (out / "degraded").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directories under {out}: {exc}") from exc
    entries = []
    for entry, clean, degraded in iter_corpus(config):
        entry["clean_path"] = f"clean/{entry['id']}.png"
        entry["degraded_path"] = f"degraded/{entry['id']}.png"
        for key, img in (("clean_path", clean), ("degraded_path", degraded)):
            path = out / entry[key]
            try:
                img.save_png(path)
            except OSError as exc:
                raise OSError(f"failed to write {path}: {exc}") from exc
        entries.append({k: entry[k] for k in ("id", "type", "clean_path", "degraded_path", "seed")})
    with open(out / "manifest.jsonl", "w") as fh:
        fh.writelines(json.dumps(e) + "\n" for e in entries)
    return entries


def load_corpus(manifest_path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a corpus manifest back into (N, C, H, W) arrays and type indices."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    clean, degraded, types = [], [], []
    with open(manifest_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            e = json.loads(line)
            clean.append(ImageBuffer.load(root / e["clean_path"]).pixels.transpose(2, 0, 1))
            degraded.append(ImageBuffer.load(root / e["degraded_path"]).pixels.transpose(2, 0, 1))
            types.append(RAIN_TYPES.index(e["type"]))
    if not types:
        raise ValueError(f"corpus manifest {manifest_path} is empty")
    return np.stack(clean), np.stack(degraded), np.asarray(types)

"""Deterministic common-corruption protocol for evaluation images.

Four families (noise, blur, weather, digital) with 19 subtypes and severities
1-5. The subtype of an image is chosen by a seeded FNV-1a hash of its id, and
the same hash keys the image's random stream, so every output byte is a
function of (image, family, severity, id, seed) alone.

Except for glass blur, whose pixel shuffles depend on the radius, random fields
are drawn identically at every severity and severity only scales how strongly
they are applied, which keeps the distance to the clean image non-decreasing
across the ladder.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from latent_denoising import kernels
from latent_denoising.numerics import SeededRng
from latent_denoising.pnm import PnmError, read_ppm, write_ppm

log = logging.getLogger(__name__)

FAMILIES: dict[str, tuple[str, ...]] = {
    "noise": ("gaussian", "shot", "impulse", "speckle"),
    "blur": ("defocus", "glass", "motion", "zoom", "gaussian"),
    "weather": ("snow", "frost", "fog", "brightness", "spatter"),
    "digital": ("contrast", "elastic", "pixelate", "jpeg", "saturate"),
}

# Severity ladders, one parameter tuple per severity 1..5, plus the parameter
# tuple that leaves an image unchanged.
LADDERS: dict[tuple[str, str], tuple[tuple[float, ...], list[tuple[float, ...]]]] = {
    ("noise", "gaussian"): ((0.0,), [(0.04,), (0.06,), (0.08,), (0.09,), (0.10,)]),
    ("noise", "shot"): ((0.0,), [(1 / 60,), (1 / 25,), (1 / 12,), (1 / 5,), (1 / 3,)]),
    ("noise", "impulse"): ((0.0,), [(0.03,), (0.06,), (0.09,), (0.17,), (0.27,)]),
    ("noise", "speckle"): ((0.0,), [(0.15,), (0.20,), (0.35,), (0.45,), (0.60,)]),
    ("blur", "defocus"): ((0.0,), [(1,), (2,), (3,), (5,), (7,)]),
    ("blur", "glass"): ((0.0, 0, 0), [(0.5, 1, 1), (0.6, 1, 2), (0.7, 2, 2), (0.8, 2, 3), (1.0, 3, 3)]),
    ("blur", "motion"): ((1,), [(3,), (5,), (7,), (9,), (11,)]),
    ("blur", "zoom"): ((1.0,), [(1.06,), (1.11,), (1.16,), (1.21,), (1.26,)]),
    ("blur", "gaussian"): ((0.0,), [(0.6,), (1.0,), (1.5,), (2.0,), (3.0,)]),
    ("weather", "snow"): ((0.0, 0.0), [(0.02, 0.05), (0.04, 0.10), (0.06, 0.15), (0.09, 0.20), (0.12, 0.25)]),
    ("weather", "frost"): ((0.0,), [(0.20,), (0.30,), (0.40,), (0.50,), (0.60,)]),
    ("weather", "fog"): ((0.0,), [(0.25,), (0.40,), (0.55,), (0.70,), (0.85,)]),
    ("weather", "brightness"): ((0.0,), [(0.1,), (0.2,), (0.3,), (0.4,), (0.5,)]),
    ("weather", "spatter"): ((0.0, 0.0), [(0.05, 0.4), (0.10, 0.5), (0.15, 0.6), (0.20, 0.7), (0.30, 0.8)]),
    ("digital", "contrast"): ((0.0,), [(0.60,), (0.70,), (0.80,), (0.90,), (0.95,)]),
    ("digital", "elastic"): ((0.0,), [(1.0,), (1.5,), (2.0,), (2.5,), (3.0,)]),
    ("digital", "pixelate"): ((1,), [(2,), (3,), (4,), (6,), (8,)]),
    ("digital", "jpeg"): ((0.0,), [(0.4,), (0.8,), (1.25,), (2.0,), (10 / 3,)]),
    ("digital", "saturate"): ((0.0,), [(0.3,), (0.7,), (1.2,), (2.0,), (3.0,)]),
}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    subtype: str
    severity: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ProtocolError(f"unknown family {self.family!r}")
        if self.subtype not in FAMILIES[self.family]:
            raise ProtocolError(f"{self.subtype!r} is not a {self.family} subtype")
        if self.severity not in range(1, 6):
            raise ProtocolError(f"severity must be 1..5, got {self.severity}")


@dataclass(frozen=True)
class ProtocolConfig:
    seed: int
    family: str
    severity: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ProtocolError(f"unknown family {self.family!r}")
        if self.severity not in range(1, 6):
            raise ProtocolError(f"severity must be 1..5, got {self.severity}")


def protocol_hash(image_id: str, family: str, seed: int) -> int:
    """FNV-1a 64 over ``f"{seed}:{family}:{image_id}"``."""
    return int(kernels.fnv1a64(f"{seed}:{family}:{image_id}".encode("utf-8")))


def select_subtype(image_id: str, family: str, seed: int) -> str:
    if not image_id:
        raise ProtocolError("image id must be non-empty")
    subtypes = FAMILIES[family]
    return subtypes[protocol_hash(image_id, family, seed) % len(subtypes)]


def protocol_rng(image_id: str, family: str, seed: int) -> SeededRng:
    return SeededRng(protocol_hash(image_id, family, seed), "image-corruption")


# --- random fields -----------------------------------------------------------


def _fractal_noise(rng: SeededRng, h: int, w: int, octaves: int = 4, persistence: float = 0.55) -> np.ndarray:
    """Sum of bilinearly upsampled value-noise octaves, scaled to [0, 1]."""
    out = np.zeros((h, w))
    amp = 1.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1)
        grid = rng.uniform(size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")
        amp *= persistence
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _line_kernel(length: int, angle: float) -> np.ndarray:
    length = max(1, int(round(length)))
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 2 * length):
        k[int(round(c + t * math.sin(angle))), int(round(c + t * math.cos(angle)))] += 1.0
    return k / k.sum()


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    if r == 0:
        return np.ones((1, 1))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = (x * x + y * y <= radius * radius).astype(np.float64)
    return k / k.sum()


def _convolve(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape == (1, 1):
        return x.copy()
    return np.stack([ndimage.correlate(x[..., c], kernel, mode="reflect") for c in range(3)], axis=-1)


def _gaussian(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return x.copy()
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")


def _luma(x: np.ndarray) -> np.ndarray:
    return x @ np.array([0.299, 0.587, 0.114])


# --- subtypes ------------------------------------------------------------------
# Each takes a float64 image in [0, 255], the image's random stream and one
# ladder entry.


def _gaussian_noise(x, rng, sigma):
    return x + sigma * 255.0 * rng.normal(x.shape)


def _shot_noise(x, rng, inv_photons):
    # Gaussian approximation of Poisson photon noise: std = sqrt(x / photons).
    return x + 255.0 * np.sqrt(x / 255.0 * inv_photons) * rng.normal(x.shape)


def _impulse_noise(x, rng, amount):
    hit = rng.uniform(size=x.shape) < amount
    salt = rng.uniform(size=x.shape) < 0.5
    out = x.copy()
    out[hit & salt] = 255.0
    out[hit & ~salt] = 0.0
    return out


def _speckle_noise(x, rng, c):
    return x + x * c * rng.normal(x.shape)


def _defocus_blur(x, rng, radius):
    return _convolve(x, _disk_kernel(radius))


def _glass_blur(x, rng, sigma, radius, iterations):
    radius, iterations = int(round(radius)), int(round(iterations))
    out = np.ascontiguousarray(_gaussian(x, sigma))
    h, w = x.shape[:2]
    rows, cols = h - 2 * radius, w - 2 * radius
    if iterations and radius and rows > 0 and cols > 0:
        offsets = rng.integers(-radius, radius, size=(iterations, rows, cols, 2))
        kernels.glass_shuffle(out, radius, np.ascontiguousarray(offsets, dtype=np.int64))
    return _gaussian(out, sigma)


def _motion_blur(x, rng, length):
    angle = rng.uniform(low=-math.pi / 4, high=math.pi / 4)
    return _convolve(x, _line_kernel(length, angle))


def _zoom_blur(x, rng, max_zoom, steps=8):
    h, w = x.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros_like(x)
    for k in range(steps):
        z = 1.0 + (max_zoom - 1.0) * k / (steps - 1)
        if z == 1.0:
            acc += x
            continue
        coords = [cy + (yy - cy) / z, cx + (xx - cx) / z]
        acc += np.stack(
            [ndimage.map_coordinates(x[..., c], coords, order=1, mode="nearest") for c in range(3)], axis=-1
        )
    return acc / steps


def _gaussian_blur(x, rng, sigma):
    return _gaussian(x, sigma)


def _snow(x, rng, coverage, lift):
    h, w = x.shape[:2]
    flakes = (rng.uniform(size=(h, w)) < coverage).astype(np.float64)
    angle = rng.uniform(low=math.pi / 3, high=2 * math.pi / 3)
    streaks = ndimage.correlate(flakes, _line_kernel(max(3, h // 8), angle), mode="wrap")
    layer = np.clip(3.0 * streaks, 0.0, 1.0)[..., None]
    return x + (255.0 - x) * (1.0 - (1.0 - lift) * (1.0 - layer))


def _frost(x, rng, amount):
    h, w = x.shape[:2]
    ridged = 1.0 - np.abs(2.0 * _fractal_noise(rng, h, w, octaves=5) - 1.0)
    crystals = ridged**3
    texture = 255.0 * (0.7 + 0.3 * crystals)[..., None] * np.array([0.86, 0.93, 1.0])
    return x + amount * (texture - x)


def _fog(x, rng, amount):
    h, w = x.shape[:2]
    haze = _fractal_noise(rng, h, w, octaves=4, persistence=0.6)[..., None]
    return x + amount * haze * (255.0 - x)


def _brightness(x, rng, delta):
    value = x.max(axis=-1, keepdims=True) / 255.0
    lifted = np.minimum(value + delta, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(value > 0, x * (lifted / np.where(value > 0, value, 1.0)), 255.0 * lifted)
    return scaled


def _spatter(x, rng, coverage, opacity):
    h, w = x.shape[:2]
    field = ndimage.gaussian_filter(rng.normal((h, w)), 1.5, mode="wrap")
    rank = np.argsort(np.argsort(field, axis=None, kind="stable"), kind="stable").reshape(h, w) / (h * w)
    wet = np.clip((rank - (1.0 - coverage)) / 0.03, 0.0, 1.0)[..., None]
    mud = np.array([70.0, 52.0, 34.0])
    return x + opacity * wet * (mud - x)


def _contrast(x, rng, amount):
    means = x.mean(axis=(0, 1), keepdims=True)
    return x - amount * (x - means)


def _elastic(x, rng, alpha):
    h, w = x.shape[:2]
    field = rng.uniform(low=-1.0, high=1.0, size=(2, h, w))
    field = np.stack([ndimage.gaussian_filter(f, 3.0, mode="reflect") for f in field])
    field /= max(np.abs(field).max(), 1e-12)
    if alpha == 0:
        return x.copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + alpha * field[0], xx + alpha * field[1]]
    return np.stack([ndimage.map_coordinates(x[..., c], coords, order=1, mode="reflect") for c in range(3)], axis=-1)


def _pixelate(x, rng, block):
    block = int(round(block))
    if block <= 1:
        return x.copy()
    h, w = x.shape[:2]
    ys, xs = np.arange(0, h, block), np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(x, ys, axis=0), xs, axis=1)
    counts = np.outer(np.diff(np.append(ys, h)), np.diff(np.append(xs, w)))[..., None]
    means = sums / counts
    return np.repeat(np.repeat(means, np.diff(np.append(ys, h)), axis=0), np.diff(np.append(xs, w)), axis=1)


_LUMA_Q = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]
_TO_YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])


def _jpeg(x, rng, scale):
    """8x8 block DCT quantize/dequantize round trip in YCbCr.

    ``scale`` multiplies the baseline quantization tables (IJG quality 50 is
    1.0); 0 disables quantization.
    """
    if scale <= 0:
        return x.copy()
    h, w = x.shape[:2]
    ph, pw = -h % 8, -w % 8
    padded = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = padded @ _TO_YCC.T
    ycc[..., 0] -= 128.0
    H, W = padded.shape[:2]
    blocks = ycc.reshape(H // 8, 8, W // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coeffs = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    tables = np.stack([_LUMA_Q, _CHROMA_Q, _CHROMA_Q])
    q = np.maximum(np.floor(tables * scale + 0.5), 1.0)
    coeffs = np.round(coeffs / q) * q
    blocks = fft.idctn(coeffs, axes=(-2, -1), norm="ortho")
    ycc = blocks.transpose(0, 3, 1, 4, 2).reshape(H, W, 3)
    ycc[..., 0] += 128.0
    rgb = ycc @ np.linalg.inv(_TO_YCC).T
    return rgb[:h, :w]


def _saturate(x, rng, amount):
    gray = _luma(x)[..., None]
    return gray + (x - gray) * (1.0 + amount)


_SUBTYPE_FN = {
    ("noise", "gaussian"): _gaussian_noise,
    ("noise", "shot"): _shot_noise,
    ("noise", "impulse"): _impulse_noise,
    ("noise", "speckle"): _speckle_noise,
    ("blur", "defocus"): _defocus_blur,
    ("blur", "glass"): _glass_blur,
    ("blur", "motion"): _motion_blur,
    ("blur", "zoom"): _zoom_blur,
    ("blur", "gaussian"): _gaussian_blur,
    ("weather", "snow"): _snow,
    ("weather", "frost"): _frost,
    ("weather", "fog"): _fog,
    ("weather", "brightness"): _brightness,
    ("weather", "spatter"): _spatter,
    ("digital", "contrast"): _contrast,
    ("digital", "elastic"): _elastic,
    ("digital", "pixelate"): _pixelate,
    ("digital", "jpeg"): _jpeg,
    ("digital", "saturate"): _saturate,
}


def severity_parameters(spec: CorruptionSpec, strength: float = 1.0) -> tuple[float, ...]:
    """Ladder entry for ``spec``; ``strength`` interpolates from the identity entry."""
    identity, ladder = LADDERS[(spec.family, spec.subtype)]
    target = ladder[spec.severity - 1]
    return tuple(i + strength * (t - i) for i, t in zip(identity, target))


def apply_image_corruption(img: np.ndarray, spec: CorruptionSpec, rng: SeededRng, *, strength: float = 1.0) -> np.ndarray:
    """Corrupt an HxWx3 uint8 image; output has the same shape and dtype.

    ``strength`` is a test hook scaling the severity parameters toward the
    identity (0 returns the input unchanged).
    """
    image = np.asarray(img)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ProtocolError("expected an HxWx3 uint8 image")
    fn = _SUBTYPE_FN.get((spec.family, spec.subtype))
    if fn is None:
        raise ProtocolError(f"unknown subtype {spec.family}/{spec.subtype}")
    out = fn(image.astype(np.float64), rng, *severity_parameters(spec, strength))
    return np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)


def corrupt_image(img: np.ndarray, image_id: str, protocol: ProtocolConfig) -> tuple[np.ndarray, CorruptionSpec]:
    """Select the subtype for ``image_id`` and apply it with the image's own stream."""
    subtype = select_subtype(image_id, protocol.family, protocol.seed)
    spec = CorruptionSpec(protocol.family, subtype, protocol.severity)
    rng = protocol_rng(image_id, protocol.family, protocol.seed)
    return apply_image_corruption(img, spec, rng), spec


MANIFEST_HEADER = ("id", "family", "subtype", "severity", "sha256")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LD_THREADS", "1")))
    except ValueError:
        return 1


def corrupt_dataset(input_path, output_path, protocol: ProtocolConfig) -> list[dict]:
    """Corrupt every ``*.ppm`` under ``input_path`` into ``output_path``.

    Output files keep their names; ``manifest.csv`` in the output directory
    lists one row per input, sorted by filename. Unreadable images are recorded
    with subtype ``skipped`` and an empty digest.
    """
    src, dst = Path(input_path), Path(output_path)
    if not src.is_dir():
        raise ProtocolError(f"input directory {src} does not exist")
    dst.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".ppm" and p.is_file())

    def process(path: Path) -> dict:
        image_id = path.stem
        try:
            image = read_ppm(path)
        except (PnmError, OSError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            return dict(zip(MANIFEST_HEADER, (image_id, protocol.family, "skipped", protocol.severity, "")))
        out, spec = corrupt_image(image, image_id, protocol)
        data = write_ppm(dst / path.name, out)
        digest = hashlib.sha256(data).hexdigest()
        return dict(zip(MANIFEST_HEADER, (image_id, spec.family, spec.subtype, spec.severity, digest)))

    workers = min(_worker_count(), max(1, len(files)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(process, files))
    else:
        rows = [process(p) for p in files]

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (dst / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows

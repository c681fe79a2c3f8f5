"""Per-stripe appearance descriptors.

An image is cut into 6 non-overlapping horizontal stripes; each stripe yields
a 430-dim nonnegative descriptor made of 10 independently l1-normalized
histogram blocks:

    uniform LBP, 8 neighbors / radius 1   ->  59 bins
    uniform LBP, 16 neighbors / radius 2  -> 243 bins
    16-bin color histograms for R, G, B, H, S, Y, U, V -> 8 x 16 = 128 bins

Histograms discard pixel position, so the descriptor is invariant to
horizontal translation of content inside a stripe.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 430
N_STRIPES = 6
# block boundaries used for per-block l1 normalization checks and synthesis
BLOCK_SIZES = (59, 243, 16, 16, 16, 16, 16, 16, 16, 16)


class PpmDecodeError(ValueError):
    """Malformed P6 stream; message carries the offending byte offset."""


@dataclass(frozen=True)
class ImageRGB:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8 with shape (height, width, 3)")


def decode_ppm(data: bytes) -> ImageRGB:
    """Decode a binary (P6) PPM with 8-bit samples."""
    if data[:2] != b"P6":
        raise PpmDecodeError("not a P6 stream (byte offset 0)")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and '#' comment lines between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PpmDecodeError(f"expected header integer (byte offset {start})")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PpmDecodeError(f"non-positive dimensions {width}x{height} (byte offset 2)")
    if maxval != 255:
        raise PpmDecodeError(f"unsupported maxval {maxval}, need 255 (byte offset {pos - len(str(maxval))})")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmDecodeError(f"missing whitespace after maxval (byte offset {pos})")
    pos += 1
    need = width * height * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PpmDecodeError(f"truncated payload: expected {need} bytes from byte offset {pos}, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageRGB(width=width, height=height, pixels=pixels)


def encode_ppm(img: ImageRGB) -> bytes:
    """Inverse of decode_ppm; handy for writing test fixtures and mocks."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def split_stripes(img: ImageRGB, n: int = N_STRIPES) -> list[ImageRGB]:
    """Cut the image into n horizontal stripes, top to bottom.

    Stripe i spans rows [round(i*H/n), round((i+1)*H/n)) with round-half-up,
    so remainder rows are spread across stripes instead of piling up at the
    bottom.
    """
    if img.height < n:
        raise ValueError(f"image height {img.height} is smaller than the stripe count {n}")
    bounds = [int(np.floor(i * img.height / n + 0.5)) for i in range(n + 1)]
    stripes = []
    for i in range(n):
        rows = img.pixels[bounds[i] : bounds[i + 1]].copy()
        stripes.append(ImageRGB(width=img.width, height=bounds[i + 1] - bounds[i], pixels=rows))
    return stripes


@lru_cache(maxsize=None)
def _uniform_lut(neighbors: int) -> tuple[np.ndarray, int]:
    """Bin lookup for u2 patterns: each code with <=2 circular 0/1 transitions
    gets its own bin (ascending code order); everything else shares the last bin."""
    codes = np.arange(1 << neighbors, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(neighbors)) & 1
    transitions = (bits != np.roll(bits, -1, axis=1)).sum(axis=1)
    uniform = transitions <= 2
    n_uniform = int(uniform.sum())
    lut = np.full(1 << neighbors, n_uniform, dtype=np.int64)
    lut[uniform] = np.arange(n_uniform)
    return lut, n_uniform + 1


def uniform_bin_of(code: int, neighbors: int) -> int:
    """Histogram bin holding a given raw pattern code."""
    lut, _ = _uniform_lut(neighbors)
    return int(lut[code])


def lbp_histogram(gray: np.ndarray, neighbors: int, radius: int) -> np.ndarray:
    """l1-normalized uniform-pattern histogram of circular LBP codes.

    Neighbor p sits at angle 2*pi*p/P on a radius-R circle and is read with
    bilinear interpolation; the comparison is sample >= center (ties are 1).
    Pixels within `radius` of the border have no full neighborhood and are
    excluded. A stripe too small to contain any interior pixel produces an
    all-zero histogram (logged), which downstream treats as a degenerate block.
    """
    if (neighbors, radius) not in {(8, 1), (16, 2)}:
        raise ValueError("supported configurations are (8,1) and (16,2)")
    gray = np.asarray(gray, dtype=float)
    lut, n_bins = _uniform_lut(neighbors)
    h, w = gray.shape
    if h < 2 * radius + 1 or w < 2 * radius + 1:
        log.warning("stripe %dx%d too small for LBP radius %d; emitting all-zero block", h, w, radius)
        return np.zeros(n_bins)
    angles = 2.0 * np.pi * np.arange(neighbors) / neighbors
    dr = -radius * np.sin(angles)
    dc = radius * np.cos(angles)
    # snap offsets that are integers up to float noise, so exact grid samples
    # are read directly instead of interpolated
    dr = np.where(np.abs(dr - np.rint(dr)) < 1e-9, np.rint(dr), dr)
    dc = np.where(np.abs(dc - np.rint(dc)) < 1e-9, np.rint(dc), dc)

    rows = np.arange(radius, h - radius, dtype=float)[:, None]
    cols = np.arange(radius, w - radius, dtype=float)[None, :]
    center = gray[radius : h - radius, radius : w - radius]
    codes = np.zeros(center.shape, dtype=np.int64)
    for p in range(neighbors):
        rr = rows + dr[p]
        cc = cols + dc[p]
        r0 = np.floor(rr).astype(np.int64)
        c0 = np.floor(cc).astype(np.int64)
        fr = rr - r0
        fc = cc - c0
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        sample = (
            (1 - fr) * (1 - fc) * gray[r0, c0]
            + (1 - fr) * fc * gray[r0, c1]
            + fr * (1 - fc) * gray[r1, c0]
            + fr * fc * gray[r1, c1]
        )
        # 1e-9 guard: bilinear reading of a flat region reproduces the value
        # only to ~1 ulp, and ties must count as >=
        codes |= (sample >= center - 1e-9).astype(np.int64) << p
    hist = np.bincount(lut[codes.ravel()], minlength=n_bins).astype(float)
    return hist / hist.sum()


def rgb_to_gray(pixels: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (H, W, 3) array, as float64."""
    p = pixels.astype(float)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


def _channel_planes(pixels: np.ndarray) -> list[np.ndarray]:
    """R, G, B, H, S, Y, U, V planes, each scaled into [0, 255]."""
    p = pixels.astype(float)
    r, g, b = p[..., 0], p[..., 1], p[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(mx > 0, delta / mx, 0.0) * 255.0
        hue = np.zeros_like(delta)
        nz = delta > 0
        is_r = nz & (mx == r)
        is_g = nz & ~is_r & (mx == g)
        is_b = nz & ~is_r & ~is_g
        hue[is_r] = np.mod((g[is_r] - b[is_r]) / delta[is_r], 6.0)
        hue[is_g] = (b[is_g] - r[is_g]) / delta[is_g] + 2.0
        hue[is_b] = (r[is_b] - g[is_b]) / delta[is_b] + 4.0
    hue = hue * 60.0 * (255.0 / 360.0)  # [0, 360) -> [0, 255); undefined hue stays 0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = np.clip(0.492 * (b - y) + 128.0, 0.0, 255.0)
    v = np.clip(0.877 * (r - y) + 128.0, 0.0, 255.0)
    return [r, g, b, hue, sat, y, u, v]


def color_histograms(stripe: ImageRGB) -> np.ndarray:
    """Eight 16-bin l1-normalized channel histograms, concatenated (128 dims)."""
    out = []
    for plane in _channel_planes(stripe.pixels):
        bins = np.minimum(np.floor(plane / 16.0).astype(np.int64), 15)
        hist = np.bincount(bins.ravel(), minlength=16).astype(float)
        out.append(hist / hist.sum())
    return np.concatenate(out)


def stripe_descriptor(stripe: ImageRGB) -> np.ndarray:
    """430-dim stripe descriptor: LBP(8,1) | LBP(16,2) | color (each block l1-normalized)."""
    gray = rgb_to_gray(stripe.pixels)
    parts = [lbp_histogram(gray, 8, 1), lbp_histogram(gray, 16, 2), color_histograms(stripe)]
    desc = np.concatenate(parts)
    assert desc.shape == (DESCRIPTOR_DIM,)
    return desc


def image_descriptors(img: ImageRGB, n: int = N_STRIPES) -> np.ndarray:
    """Stack of per-stripe descriptors for one image, shape (n, 430)."""
    return np.stack([stripe_descriptor(s) for s in split_stripes(img, n)])


def block_slices() -> list[slice]:
    """Slices of the 10 independently normalized blocks inside a descriptor."""
    out, start = [], 0
    for size in BLOCK_SIZES:
        out.append(slice(start, start + size))
        start += size
    return out

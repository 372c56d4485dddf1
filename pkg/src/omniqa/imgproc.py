"""Raster primitives for equirectangular panoramas.

Grayscale rasters are plain (H, W) float arrays in [0, 1]; RGB rasters are
(H, W, 3) uint8.  Horizontal borders wrap (the panorama seam), vertical
borders clamp — the raster is a cylinder, not a torus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage, signal


class ImageError(ValueError):
    """Invalid raster contents or shape."""


@dataclass(frozen=True)
class Keypoint:
    """A detected blob: position in continuous pixels and a response score."""

    x: float
    y: float
    response: float


def check_gray(img: np.ndarray) -> np.ndarray:
    """Validate a grayscale raster: 2D, finite, floating point."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ImageError(f"expected non-empty 2D grayscale array, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ImageError(f"grayscale raster must be float, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ImageError("grayscale raster contains non-finite values")
    return img


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of an 8-bit RGB raster, scaled to [0, 1] float32."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.size == 0:
        raise ImageError(f"expected non-empty (H, W, 3) RGB array, got shape {rgb.shape}")
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    luma = 0.299 * r + 0.587 * g + 0.114 * b
    return (luma / 255.0).astype(np.float32)


def downsample_auto(img: np.ndarray) -> np.ndarray:
    """Box-filter downsample by f = max(1, round(min(H, W) / 256)).

    Trailing rows/columns that do not fill a complete f x f block are dropped.
    """
    img = check_gray(img)
    h, w = img.shape
    f = max(1, round(min(h, w) / 256))
    if f == 1:
        return img
    h2, w2 = h // f, w // f
    blocks = img[: h2 * f, : w2 * f].reshape(h2, f, w2, f)
    return blocks.mean(axis=(1, 3)).astype(img.dtype)


def pad_wrap(img: np.ndarray, frac: float) -> np.ndarray:
    """Append ceil(frac * W) wrapped columns on each side of the raster."""
    img = check_gray(img)
    if not 0.0 <= frac <= 0.5:
        raise ImageError(f"pad fraction {frac} outside [0, 0.5]")
    p = math.ceil(frac * img.shape[1])
    if p == 0:
        return img
    return np.concatenate([img[:, -p:], img, img[:, :p]], axis=1)


def strip_pad(img: np.ndarray, pad_cols: int) -> np.ndarray:
    """Remove pad_cols columns from each side (inverse of pad_wrap's framing)."""
    if pad_cols == 0:
        return img
    if 2 * pad_cols >= img.shape[1]:
        raise ImageError(f"cannot strip {pad_cols} columns from width {img.shape[1]}")
    return img[:, pad_cols:-pad_cols]


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """(2r+1) x (2r+1) isotropic Gaussian, normalized to sum exactly 1."""
    if sigma <= 0:
        raise ImageError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ImageError(f"radius must be >= 1, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-(d * d) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    return k / k.sum()


def convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2D convolution with wrap-x / clamp-y borders.

    True convolution: an impulse reproduces the kernel (not its mirror)
    centered on the impulse, wrapping across the seam.
    """
    img = check_gray(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ImageError(f"kernel must be odd-sized 2D, got shape {kernel.shape}")
    ry, rx = kernel.shape[0] // 2, kernel.shape[1] // 2
    padded = np.pad(img.astype(np.float64), ((ry, ry), (0, 0)), mode="edge")
    padded = np.pad(padded, ((0, 0), (rx, rx)), mode="wrap")
    out = signal.convolve(padded, kernel, mode="valid")
    return out.astype(img.dtype)


def _gauss_1d(sigma: float, order: int) -> np.ndarray:
    """Sampled 1D Gaussian or its first/second derivative (radius 4 sigma)."""
    r = max(2, math.ceil(4.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * sigma * sigma)) / (math.sqrt(2.0 * math.pi) * sigma)
    if order == 0:
        return g / g.sum()
    if order == 1:
        return -t / sigma**2 * g
    if order == 2:
        return (t * t / sigma**4 - 1.0 / sigma**2) * g
    raise ValueError(order)


def _sep_filter(img: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Separable convolution, wrapping along x and clamping along y."""
    out = ndimage.convolve1d(img, kx, axis=1, mode="wrap")
    return ndimage.convolve1d(out, ky, axis=0, mode="nearest")


def det_hessian_keypoints(
    img: np.ndarray,
    scales: tuple[float, ...] = (1.2, 2.4, 4.8),
    threshold: float = 1e-4,
) -> list[Keypoint]:
    """Multi-scale determinant-of-Hessian blob detection.

    Per scale sigma the scale-normalized second derivatives sigma^2 * Lxx,
    sigma^2 * Lyy, sigma^2 * Lxy are computed with exact Gaussian-derivative
    filters and combined as Lxx * Lyy - (0.9 * Lxy)^2.  Keypoints are strict
    local maxima over the 3x3 spatial neighborhood and adjacent scales, above
    the response threshold, sorted by descending response then row-major.
    """
    img = check_gray(img).astype(np.float64)
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ImageError(f"image {img.shape} too small for detection (needs >= 16x16)")
    if not scales:
        raise ImageError("need at least one detection scale")

    responses = np.empty((len(scales),) + img.shape)
    for i, sigma in enumerate(scales):
        g0 = _gauss_1d(sigma, 0)
        g2 = _gauss_1d(sigma, 2)
        g1 = _gauss_1d(sigma, 1)
        s2 = sigma * sigma
        lxx = s2 * _sep_filter(img, g2, g0)
        lyy = s2 * _sep_filter(img, g0, g2)
        lxy = s2 * _sep_filter(img, g1, g1)
        responses[i] = lxx * lyy - (0.9 * lxy) ** 2

    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    # Explicit border padding: x wraps across the seam; scale and y boundaries
    # see -inf, i.e. candidates there compare only against real neighbors.
    padded = np.pad(responses, ((1, 1), (1, 1), (0, 0)),
                    mode="constant", constant_values=-np.inf)
    padded = np.pad(padded, ((0, 0), (0, 0), (1, 1)), mode="wrap")
    neighbor_max = ndimage.maximum_filter(padded, footprint=footprint,
                                          mode="constant", cval=-np.inf)
    neighbor_max = neighbor_max[1:-1, 1:-1, 1:-1]
    keep = (responses > neighbor_max) & (responses > threshold)
    ss, ys, xs = np.nonzero(keep)
    points = [
        Keypoint(float(x), float(y), float(responses[s, y, x]))
        for s, y, x in zip(ss, ys, xs)
    ]
    points.sort(key=lambda p: (-p.response, p.y, p.x))
    return points


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with wrap-x / clamp-y borders.

    Accepts (H, W) or (H, W, C) float arrays; returns float64.
    """
    if sigma <= 0:
        raise ImageError(f"sigma must be positive, got {sigma}")
    g = _gauss_1d(sigma, 0)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return _sep_filter(arr, g, g)
    if arr.ndim == 3:
        return np.dstack([_sep_filter(arr[:, :, c], g, g) for c in range(arr.shape[2])])
    raise ImageError(f"expected 2D or 3D raster, got shape {arr.shape}")


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation with x wrapping at the seam and y clamped.

    Works for (H, W) and (H, W, C) rasters; x/y may be scalars or arrays.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    x = np.mod(np.asarray(x, dtype=np.float64), w)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)

    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.mod(x0 + 1, w)
    y1 = np.minimum(y0 + 1, h - 1)

    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    vals = img.astype(np.float64)
    top = vals[y0, x0] * (1.0 - fx) + vals[y0, x1] * fx
    bot = vals[y1, x0] * (1.0 - fx) + vals[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def local_contrast_normalize(img: np.ndarray, sigma: float = 1.2,
                             c: float = 1.0 / 255.0) -> np.ndarray:
    """Mean-subtracted contrast-normalized (MSCN) coefficients per channel.

    (x - mu) / (sd + c) with mu/sd from a local Gaussian window.  Distortion
    statistics survive this transform while absolute brightness and contrast
    (pure content cues) are removed.
    """
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    out = np.empty_like(arr)
    for ch in range(arr.shape[2]):
        mu = gaussian_blur(arr[:, :, ch], sigma)
        var = gaussian_blur((arr[:, :, ch] - mu) ** 2, sigma)
        out[:, :, ch] = (arr[:, :, ch] - mu) / (np.sqrt(np.maximum(var, 0.0)) + c)
    return out[:, :, 0] if squeeze else out


def resize_rgb(rgb: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 raster; identity when sizes match.

    Sampling wraps horizontally, so panorama seams stay continuous.
    """
    rgb = np.asarray(rgb)
    h, w = rgb.shape[:2]
    if (h, w) == (h2, w2):
        return rgb
    xs = (np.arange(w2) + 0.5) * (w / w2) - 0.5
    ys = (np.arange(h2) + 0.5) * (h / h2) - 0.5
    xg, yg = np.meshgrid(xs, ys)
    vals = bilinear_sample(rgb, xg, yg)
    return np.clip(np.round(vals), 0, 255).astype(np.uint8)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio between two uint8 rasters (dB; inf if equal)."""
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def read_png(path) -> np.ndarray:
    """Load a PNG as (H, W, 3) uint8 RGB or (H, W) uint8 grayscale."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im)
        return np.asarray(im.convert("RGB"))


def write_png(path, arr: np.ndarray) -> None:
    """Write uint8 RGB/gray, or float gray in [0, 1] (scaled to 8 bits)."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")

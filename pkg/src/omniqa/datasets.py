"""Dataset plumbing: CSV manifests, synthetic panoramas, distortion ladder,
and the 2D patch set used for descriptor pretraining.

Real subjective databases are not bundled; the synthetic generator produces
seeded panoramas with three distortion types at five strengths each and a
monotone pseudo-MOS, which is all the rank-based end-to-end checks need.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as spfft

from . import imgproc

DISTORTION_TYPES = ("jpeg-like", "blur", "noise", "none")
BLUR_SIGMAS = (0.5, 1.0, 2.0, 4.0, 8.0)
NOISE_SIGMAS = (2.0, 5.0, 10.0, 20.0, 40.0)
JPEG_QUALITIES = (80, 60, 40, 20, 10)

# Standard 8x8 luminance quantization table (quality 50).
_Q50 = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class DataError(ValueError):
    """Malformed manifest or dataset contents."""


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    ref_id: str
    distortion_type: str
    level: int
    mos: float


MANIFEST_COLUMNS = ("image_path", "ref_id", "distortion_type", "level", "mos")


def load_manifest(path) -> list[ManifestRecord]:
    """Parse and validate a manifest CSV.

    Relative image paths resolve against the manifest's directory; every
    referenced image must exist.  Errors carry the offending line number.
    Duplicate image paths are kept but warned about.
    """
    base = os.path.dirname(os.path.abspath(path))
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            img = row["image_path"]
            if img is None or img == "":
                raise DataError(f"{path}:{line_no}: empty image_path")
            resolved = img if os.path.isabs(img) else os.path.join(base, img)
            if not os.path.exists(resolved):
                raise DataError(f"{path}:{line_no}: image not found: {resolved}")
            ref = (row["ref_id"] or "").strip()
            if not ref:
                raise DataError(f"{path}:{line_no}: empty ref_id")
            dtype = row["distortion_type"]
            if dtype not in DISTORTION_TYPES:
                raise DataError(
                    f"{path}:{line_no}: unknown distortion_type {dtype!r} "
                    f"(expected one of {', '.join(DISTORTION_TYPES)})")
            try:
                level = int(row["level"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line_no}: non-integer level {row['level']!r}") from None
            if not 1 <= level <= 5:
                raise DataError(f"{path}:{line_no}: level {level} outside 1..5")
            try:
                mos = float(row["mos"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line_no}: non-numeric mos {row['mos']!r}") from None
            if not math.isfinite(mos):
                raise DataError(f"{path}:{line_no}: non-finite mos")
            if resolved in seen:
                warnings.warn(f"{path}:{line_no}: duplicate image_path {img}", stacklevel=2)
            seen.add(resolved)
            records.append(ManifestRecord(resolved, ref, dtype, level, mos))
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    """Write records with image paths relative to the manifest directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            rel = os.path.relpath(r.image_path, base)
            writer.writerow([rel, r.ref_id, r.distortion_type, r.level, f"{r.mos:.9g}"])


def _block_dct_quantize(channel: np.ndarray, quality: int) -> np.ndarray:
    """JPEG-style 8x8 DCT quantization of one 0..255 channel."""
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    qm = np.clip(np.floor((_Q50 * scale + 50.0) / 100.0), 1, 255)

    h, w = channel.shape
    ph, pw = (-h) % 8, (-w) % 8
    arr = np.pad(channel.astype(np.float64) - 128.0, ((0, ph), (0, pw)), mode="edge")
    hb, wb = arr.shape[0] // 8, arr.shape[1] // 8
    blocks = arr.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
    coeffs = spfft.dctn(blocks, axes=(2, 3), norm="ortho")
    coeffs = np.round(coeffs / qm) * qm
    rec = spfft.idctn(coeffs, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)
    return rec[:h, :w] + 128.0


def synth_distort(reference: np.ndarray, distortion_type: str, level: int,
                  seed: int) -> tuple[np.ndarray, float]:
    """Apply one distortion at one strength; returns (image, pseudo-MOS).

    Pseudo-MOS is 10 - 1.8 * level plus seeded jitter in [-0.2, 0.2]: a
    monotone stand-in for subjective scores, not a perceptual model.
    """
    if not 1 <= level <= 5:
        raise DataError(f"level {level} outside 1..5")
    reference = np.asarray(reference)
    rng = np.random.default_rng(seed)
    if distortion_type == "blur":
        out = imgproc.gaussian_blur(reference.astype(np.float64), BLUR_SIGMAS[level - 1])
    elif distortion_type == "noise":
        out = reference.astype(np.float64) + rng.normal(
            0.0, NOISE_SIGMAS[level - 1], size=reference.shape)
    elif distortion_type == "jpeg-like":
        q = JPEG_QUALITIES[level - 1]
        out = np.dstack([_block_dct_quantize(reference[:, :, c], q) for c in range(3)])
    elif distortion_type == "none":
        out = reference.astype(np.float64)
    else:
        raise DataError(f"unknown distortion type {distortion_type!r}")
    img = np.clip(np.round(out), 0, 255).astype(np.uint8)
    severity = 0.0 if distortion_type == "none" else 1.8 * level
    mos = 10.0 - severity + float(rng.uniform(-0.2, 0.2))
    return img, mos


def generate_reference(height: int, width: int, seed: int) -> np.ndarray:
    """A seeded synthetic panorama: layered blurred noise, a latitude ramp,
    and a handful of soft blobs.  Horizontally continuous across the seam;
    textured enough for blob detection at every working scale.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, 3), dtype=np.float64)
    for sigma, weight in ((1.5, 0.6), (4.0, 1.0), (12.0, 1.6)):
        noise = rng.normal(size=(height, width, 3))
        layer = imgproc.gaussian_blur(noise, sigma)
        layer /= max(layer.std(), 1e-9)
        img += weight * layer

    lat = np.linspace(1.0, -1.0, height)[:, None, None]
    img += lat * rng.uniform(0.5, 1.5, size=3)[None, None, :]

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(10):
        cx, cy = rng.uniform(0, width), rng.uniform(0.15 * height, 0.85 * height)
        sigma = rng.uniform(3.0, height / 8.0)
        dx = np.mod(xx - cx + width / 2.0, width) - width / 2.0
        bump = np.exp(-(dx * dx + (yy - cy) ** 2) / (2.0 * sigma * sigma))
        img += bump[:, :, None] * rng.uniform(-2.5, 2.5, size=3)[None, None, :]

    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    img = (img - lo) / np.maximum(hi - lo, 1e-9)
    return np.clip(np.round(img * 235.0 + 10.0), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(
    out_dir,
    n_refs: int = 8,
    seed: int = 0,
    height: int = 128,
    width: int = 256,
    types: tuple[str, ...] = ("jpeg-like", "blur", "noise"),
    n_levels: int = 5,
) -> list[ManifestRecord]:
    """Write reference + distorted panoramas and a manifest under out_dir.

    Every image's seed derives from (seed, ref index, type index, level), so
    the whole dataset is a pure function of the arguments.
    """
    if n_refs < 4:
        raise DataError(f"need at least 4 references for the split, got {n_refs}")
    os.makedirs(out_dir, exist_ok=True)
    records: list[ManifestRecord] = []
    for ri in range(n_refs):
        ref_seed = np.random.SeedSequence([seed, ri]).generate_state(1)[0]
        ref = generate_reference(height, width, int(ref_seed))
        ref_name = f"ref{ri:02d}"
        imgproc.write_png(os.path.join(out_dir, f"{ref_name}.png"), ref)
        for ti, dtype in enumerate(types):
            for level in range(1, n_levels + 1):
                img_seed = np.random.SeedSequence([seed, ri, ti, level]).generate_state(1)[0]
                img, mos = synth_distort(ref, dtype, level, int(img_seed))
                fname = f"{ref_name}_{dtype.replace('-', '')}_l{level}.png"
                fpath = os.path.join(out_dir, fname)
                imgproc.write_png(fpath, img)
                records.append(ManifestRecord(os.path.abspath(fpath), ref_name,
                                              dtype, level, mos))
    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    return records


def load_images(records: list[ManifestRecord]) -> list[np.ndarray]:
    return [imgproc.read_png(r.image_path) for r in records]


def make_pretrain_patches(n_patches: int, size: int = 64, seed: int = 0,
                          erp_size: tuple[int, int] = (128, 256),
                          fov: float = 90.0) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic quality-labeled 2D patches for descriptor pretraining.

    Each patch is a perspective window cut from a fresh synthetic panorama
    that was distorted as a whole, so patch statistics match what the
    descriptor will see downstream.  Patches come in same-content groups
    (one pristine anchor, one patch per distortion type at a random level,
    plus one extra draw, seen from two viewing directions), so the only
    learnable label signal is the distortion itself, never the content.
    """
    from .sphere import SphericalCoord
    from .viewpoint import ViewpointSet, extract_viewports

    if n_patches < 1:
        raise DataError("need at least one patch")
    rng = np.random.default_rng([seed, 0xA7C])
    dist_types = ("jpeg-like", "blur", "noise")
    h, w = erp_size
    patches = np.empty((n_patches, size, size, 3), dtype=np.uint8)
    labels = np.empty(n_patches, dtype=np.float64)
    i = 0
    while i < n_patches:
        pano = generate_reference(h, w, int(rng.integers(0, 2 ** 31)))
        centers = ViewpointSet(tuple(
            SphericalCoord(float(rng.uniform(-180.0, 180.0)),
                           float(rng.uniform(-55.0, 55.0)))
            for _ in range(2)))
        group = [("none", 1)]
        group += [(t, int(rng.integers(1, 6))) for t in dist_types]
        group.append((dist_types[int(rng.integers(0, 3))], int(rng.integers(1, 6))))
        for dtype_i, level in group:
            distorted, mos = synth_distort(pano, dtype_i, level,
                                           int(rng.integers(0, 2 ** 31)))
            views = extract_viewports(distorted, centers, fov=fov, size=size)
            for v in views:
                if i >= n_patches:
                    break
                patches[i] = v
                labels[i] = mos
                i += 1
    return patches, labels

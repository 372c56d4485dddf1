"""Viewpoint detection and viewport sampling.

The detector turns a panorama into a saliency heatmap (keypoint responses
blurred by a Gaussian), greedily picks well-separated peak directions, and
cuts out a square gnomonic viewport around each one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import imgproc
from .sphere import (
    ErpGeometry,
    SphericalCoord,
    ViewportSpec,
    angular_dist,
    pix_to_sph,
    sph_to_pix_grid,
    viewport_ray_grid,
)


@dataclass(frozen=True)
class DetectorConfig:
    """Knobs of the viewpoint detector.

    Defaults: 20 viewpoints at least 30 degrees apart (spread over the
    sphere rather than crowding one region), seam padding of 12.5% of the
    width, and a heat spread of 8 px at the 256x512 working resolution
    (scaled proportionally for other sizes).
    Detector scales/threshold target a few hundred blobs on natural content;
    responses are scale-normalized, so the threshold is resolution-agnostic.
    """

    n_viewpoints: int = 20
    d_th: float = 30.0
    pad_frac: float = 0.125
    heat_sigma: float = 8.0
    det_scales: tuple[float, ...] = (1.2, 2.4, 4.8)
    det_threshold: float = 1e-4

    def __post_init__(self):
        if self.n_viewpoints < 1:
            raise ValueError(f"n_viewpoints must be >= 1, got {self.n_viewpoints}")
        if not 0.0 < self.d_th < 180.0:
            raise ValueError(f"d_th {self.d_th} outside (0, 180)")
        if not 0.0 <= self.pad_frac <= 0.5:
            raise ValueError(f"pad_frac {self.pad_frac} outside [0, 0.5]")
        if self.heat_sigma <= 0:
            raise ValueError("heat_sigma must be positive")


@dataclass(frozen=True)
class ViewpointSet:
    """Selected viewing directions, in selection order.

    exhausted marks runs where the heatmap ran out of positive cells before
    the requested count was reached.
    """

    points: tuple[SphericalCoord, ...]
    responses: tuple[float, ...] = ()
    exhausted: bool = False

    def __len__(self) -> int:
        return len(self.points)

    def lons(self) -> np.ndarray:
        return np.array([p.lon for p in self.points])

    def lats(self) -> np.ndarray:
        return np.array([p.lat for p in self.points])


def build_keypoint_map(erp_gray: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Blob responses accumulated on an empty raster aligned with the padded ERP.

    The working image is auto-downsampled, seam-padded, and blob-detected.
    Each keypoint adds its response at its nearest pixel; detections that land
    in a pad margin are folded back to the interior column they duplicate, so
    their mass survives the later pad stripping.
    """
    work = imgproc.downsample_auto(erp_gray)
    width = work.shape[1]
    pad_cols = math.ceil(cfg.pad_frac * width)
    padded = imgproc.pad_wrap(work, cfg.pad_frac)
    points = imgproc.det_hessian_keypoints(padded, cfg.det_scales, cfg.det_threshold)

    kmap = np.zeros_like(padded)
    h = kmap.shape[0]
    for p in points:
        x = pad_cols + (int(round(p.x)) - pad_cols) % width
        y = min(max(int(round(p.y)), 0), h - 1)
        kmap[y, x] += p.response
    return kmap


def build_heatmap(keypoint_map: np.ndarray, cfg: DetectorConfig, pad_cols: int | None = None) -> np.ndarray:
    """Gaussian-blurred keypoint map with the pad margins stripped off.

    pad_cols defaults to the width cfg.pad_frac implies for the raster that
    build_keypoint_map produced.
    """
    radius = max(1, math.ceil(3.0 * cfg.heat_sigma))
    kernel = imgproc.gaussian_kernel(cfg.heat_sigma, radius)
    heat = imgproc.convolve2d(keypoint_map, kernel)
    if pad_cols is None:
        # padded width = W + 2 * ceil(pad_frac * W)  =>  recover the pad
        padded_w = heat.shape[1]
        for p in range(padded_w // 2 + 1):
            if math.ceil(cfg.pad_frac * (padded_w - 2 * p)) == p:
                pad_cols = p
                break
        else:
            raise imgproc.ImageError(f"cannot infer pad width for raster width {padded_w}")
    return imgproc.strip_pad(heat, pad_cols)


def select_viewpoints(heatmap: np.ndarray, cfg: DetectorConfig) -> ViewpointSet:
    """Greedy selection of peak directions.

    Repeatedly takes the global argmax (row-major on ties), zeroes that cell,
    maps it to the sphere, and accepts it iff it is farther than d_th from
    every already-accepted direction.  Stops after n_viewpoints accepts or
    when no positive cell remains.
    """
    heat = np.array(heatmap, dtype=np.float64, copy=True)
    h, w = heat.shape
    geom = ErpGeometry(w, h) if w == 2 * h else None
    accepted: list[SphericalCoord] = []
    responses: list[float] = []
    exhausted = False
    while len(accepted) < cfg.n_viewpoints:
        idx = int(np.argmax(heat))
        y, x = divmod(idx, w)
        peak = heat[y, x]
        if peak <= 0.0:
            exhausted = True
            break
        heat[y, x] = 0.0
        cand = (
            pix_to_sph(x, y, geom)
            if geom is not None
            else _pix_to_sph_rect(x, y, w, h)
        )
        if all(angular_dist(cand, p) > cfg.d_th for p in accepted):
            accepted.append(cand)
            responses.append(float(peak))
    return ViewpointSet(tuple(accepted), tuple(responses), exhausted)


def _pix_to_sph_rect(x: float, y: float, w: int, h: int) -> SphericalCoord:
    """pix_to_sph for rasters that are not exactly 2:1 (same linear mapping)."""
    lon = (x + 0.5) / w * 360.0 - 180.0
    lat = max(-90.0, 90.0 - (y + 0.5) / h * 180.0)
    return SphericalCoord(lon, lat)


def detect_viewpoints(erp_gray: np.ndarray, cfg: DetectorConfig) -> tuple[ViewpointSet, np.ndarray]:
    """Full detector: keypoint map -> heatmap -> greedy selection.

    Returns the selected set and the stripped heatmap it was selected from.
    heat_sigma is interpreted at the 256x512 working resolution and scaled
    to the actual working raster so the spread covers a constant solid angle.
    """
    work = imgproc.downsample_auto(erp_gray)
    width = work.shape[1]
    pad_cols = math.ceil(cfg.pad_frac * width)
    scale = width / 512.0
    cfg_scaled = replace(cfg, heat_sigma=max(0.75, cfg.heat_sigma * scale))
    kmap = build_keypoint_map(erp_gray, cfg_scaled)
    heat = build_heatmap(kmap, cfg_scaled, pad_cols=pad_cols)
    return select_viewpoints(heat, cfg_scaled), heat


def extract_viewports(
    erp_rgb: np.ndarray,
    viewpoints: ViewpointSet,
    fov: float = 90.0,
    size: int = 256,
) -> np.ndarray:
    """Gnomonic viewports around each viewpoint, shape (n, size, size, 3) uint8.

    Each viewport pixel casts a ray through the pinhole model, lands on the
    panorama, and is bilinearly resampled (wrapping across the seam).
    """
    erp_rgb = np.asarray(erp_rgb)
    if erp_rgb.ndim != 3 or erp_rgb.shape[2] != 3:
        raise imgproc.ImageError(f"expected (H, W, 3) RGB panorama, got {erp_rgb.shape}")
    h, w = erp_rgb.shape[:2]
    if w != 2 * h:
        raise imgproc.ImageError(f"panorama must be 2:1, got {w}x{h}")
    geom = ErpGeometry(w, h)

    out = np.empty((len(viewpoints), size, size, 3), dtype=np.uint8)
    for i, center in enumerate(viewpoints.points):
        spec = ViewportSpec(center=center, fov=fov, size=size)
        lon, lat = viewport_ray_grid(spec)
        x, y = sph_to_pix_grid(lon, lat, geom)
        vals = imgproc.bilinear_sample(erp_rgb, x, y)
        out[i] = np.clip(np.round(vals), 0, 255).astype(np.uint8)
    return out


def write_viewpoint_csv(path, viewpoints: ViewpointSet) -> None:
    """Dump a viewpoint set as CSV: index, lon, lat, response."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "lon", "lat", "response"])
        responses = viewpoints.responses or tuple([float("nan")] * len(viewpoints))
        for i, (p, r) in enumerate(zip(viewpoints.points, responses)):
            writer.writerow([i, f"{p.lon:.9g}", f"{p.lat:.9g}", f"{r:.9g}"])


def read_viewpoint_csv(path) -> ViewpointSet:
    """Load a viewpoint CSV written by write_viewpoint_csv."""
    points: list[SphericalCoord] = []
    responses: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"index", "lon", "lat", "response"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"viewpoint CSV needs columns {sorted(required)}")
        for row in reader:
            points.append(SphericalCoord(float(row["lon"]), float(row["lat"])))
            responses.append(float(row["response"]))
    return ViewpointSet(tuple(points), tuple(responses))


def dump_heatmap_png(path, heatmap: np.ndarray) -> None:
    """Write a heatmap as a max-normalized grayscale PNG."""
    peak = float(heatmap.max())
    norm = heatmap / peak if peak > 0 else heatmap
    imgproc.write_png(path, norm.astype(np.float64))

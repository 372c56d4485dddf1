"""Spherical geometry for equirectangular panoramas.

Longitude/latitude are degrees at every public boundary (radians only show
up inside formulas).  The equirectangular raster follows the pixel-center
convention: pixel (x, y) samples the sphere at the center of its cell, so
x = -0.5 and x = width - 0.5 both land on the 180-degree seam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SphereError(ValueError):
    """Invalid spherical coordinate or raster geometry."""


def _normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    lon = math.fmod(lon + 180.0, 360.0)
    if lon < 0.0:
        lon += 360.0
    return lon - 180.0


@dataclass(frozen=True)
class SphericalCoord:
    """A direction on the unit sphere: lon in [-180, 180), lat in [-90, 90]."""

    lon: float
    lat: float

    def __post_init__(self):
        if not math.isfinite(self.lon) or not math.isfinite(self.lat):
            raise SphereError(f"non-finite coordinate ({self.lon}, {self.lat})")
        if not -90.0 <= self.lat <= 90.0:
            raise SphereError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", _normalize_lon(self.lon))

    def unit_vector(self) -> np.ndarray:
        """3D unit vector; +x is (lon 0, lat 0), +z the north pole."""
        lon = math.radians(self.lon)
        lat = math.radians(self.lat)
        return np.array([
            math.cos(lat) * math.cos(lon),
            math.cos(lat) * math.sin(lon),
            math.sin(lat),
        ])


@dataclass(frozen=True)
class ErpGeometry:
    """Dimensions of an equirectangular raster (width must be 2 x height)."""

    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SphereError("raster dimensions must be positive")
        if self.width != 2 * self.height:
            raise SphereError(
                f"equirectangular raster must be 2:1, got {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class ViewportSpec:
    """A square perspective window: center direction, field of view, size."""

    center: SphericalCoord
    fov: float = 90.0
    size: int = 256

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise SphereError(f"fov {self.fov} outside (0, 180)")
        if self.size <= 0:
            raise SphereError("viewport size must be positive")

    @property
    def focal(self) -> float:
        """Pinhole focal length in pixels."""
        return self.size / (2.0 * math.tan(math.radians(self.fov) / 2.0))


def pix_to_sph(x: float, y: float, g: ErpGeometry) -> SphericalCoord:
    """Map a continuous raster position to its spherical direction.

    lon = (x + 0.5) / width * 360 - 180, lat = 90 - (y + 0.5) / height * 180.
    """
    if not (0.0 <= x < g.width and 0.0 <= y < g.height):
        raise SphereError(f"pixel ({x}, {y}) outside {g.width}x{g.height} raster")
    lon = (x + 0.5) / g.width * 360.0 - 180.0
    # The half-pixel sliver below y = height - 0.5 bottoms out at the pole.
    lat = max(-90.0, 90.0 - (y + 0.5) / g.height * 180.0)
    return SphericalCoord(lon, lat)


def sph_to_pix(p: SphericalCoord, g: ErpGeometry) -> tuple[float, float]:
    """Inverse of pix_to_sph on the continuous domain (may land outside the raster)."""
    x = (p.lon + 180.0) / 360.0 * g.width - 0.5
    y = (90.0 - p.lat) / 180.0 * g.height - 0.5
    return x, y


def angular_dist(a: SphericalCoord, b: SphericalCoord) -> float:
    """Great-circle central angle between two directions, in degrees.

    Uses the arctangent form, which stays accurate for nearly coincident and
    nearly antipodal pairs where the plain arccos form loses digits.
    """
    lon1, lat1 = math.radians(a.lon), math.radians(a.lat)
    lon2, lat2 = math.radians(b.lon), math.radians(b.lat)
    dlon = lon2 - lon1
    cos_lat2 = math.cos(lat2)
    sin_lat2 = math.sin(lat2)
    cos_lat1 = math.cos(lat1)
    sin_lat1 = math.sin(lat1)
    ny = math.hypot(
        cos_lat2 * math.sin(dlon),
        cos_lat1 * sin_lat2 - sin_lat1 * cos_lat2 * math.cos(dlon),
    )
    nx = sin_lat1 * sin_lat2 + cos_lat1 * cos_lat2 * math.cos(dlon)
    return math.degrees(math.atan2(ny, nx))


def _tangent_basis(center: SphericalCoord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(forward, right, up) orthonormal camera basis at a viewport center.

    Up follows the local meridian toward the north pole.  At the poles every
    meridian meets, so the lon-0 meridian is used as the reference there.
    """
    lon = 0.0 if abs(center.lat) == 90.0 else math.radians(center.lon)
    lat = math.radians(center.lat)
    forward = np.array([
        math.cos(lat) * math.cos(lon),
        math.cos(lat) * math.sin(lon),
        math.sin(lat),
    ])
    up = np.array([
        -math.sin(lat) * math.cos(lon),
        -math.sin(lat) * math.sin(lon),
        math.cos(lat),
    ])
    right = np.cross(up, forward)
    return forward, right, up


def viewport_ray_to_sph(u: float, v: float, spec: ViewportSpec) -> SphericalCoord:
    """Direction seen by viewport pixel (u, v) under a gnomonic projection.

    u grows rightward (increasing longitude at the equator), v grows downward.
    """
    if not (0.0 <= u < spec.size and 0.0 <= v < spec.size):
        raise SphereError(f"viewport pixel ({u}, {v}) outside {spec.size}x{spec.size}")
    forward, right, up = _tangent_basis(spec.center)
    half = spec.size / 2.0
    xc = (u + 0.5 - half) / spec.focal
    yc = (v + 0.5 - half) / spec.focal
    d = forward + xc * right - yc * up
    d /= np.linalg.norm(d)
    lon = math.degrees(math.atan2(d[1], d[0]))
    lat = math.degrees(math.asin(min(1.0, max(-1.0, d[2]))))
    return SphericalCoord(lon, lat)


def viewport_ray_grid(spec: ViewportSpec) -> tuple[np.ndarray, np.ndarray]:
    """(lon, lat) degree arrays of shape (size, size) for every viewport pixel.

    Vectorized equivalent of viewport_ray_to_sph over the full pixel grid;
    the two agree to float64 round-off.
    """
    forward, right, up = _tangent_basis(spec.center)
    half = spec.size / 2.0
    coords = (np.arange(spec.size) + 0.5 - half) / spec.focal
    xc, yc = np.meshgrid(coords, coords)
    d = (forward[None, None, :]
         + xc[:, :, None] * right[None, None, :]
         - yc[:, :, None] * up[None, None, :])
    d /= np.linalg.norm(d, axis=2, keepdims=True)
    lon = np.degrees(np.arctan2(d[:, :, 1], d[:, :, 0]))
    lat = np.degrees(np.arcsin(np.clip(d[:, :, 2], -1.0, 1.0)))
    return lon, lat


def sph_to_pix_grid(lon: np.ndarray, lat: np.ndarray, g: ErpGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sph_to_pix for degree arrays."""
    x = (lon + 180.0) / 360.0 * g.width - 0.5
    y = (90.0 - lat) / 180.0 * g.height - 0.5
    return x, y


def pairwise_angular_dist(lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """n x n matrix of great-circle angles (degrees) between directions.

    Same arctangent form as angular_dist, vectorized over all pairs.
    """
    lon = np.radians(np.asarray(lons, dtype=float))
    lat = np.radians(np.asarray(lats, dtype=float))
    dlon = lon[None, :] - lon[:, None]
    cos1, sin1 = np.cos(lat)[:, None], np.sin(lat)[:, None]
    cos2, sin2 = np.cos(lat)[None, :], np.sin(lat)[None, :]
    ny = np.hypot(cos2 * np.sin(dlon), cos1 * sin2 - sin1 * cos2 * np.cos(dlon))
    nx = sin1 * sin2 + cos1 * cos2 * np.cos(dlon)
    return np.degrees(np.arctan2(ny, nx))

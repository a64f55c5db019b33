"""Geodesic helpers: haversine distance, great-circle interpolation, bearings
and geohash cells.

Distances are surface distances in kilometres on a sphere of radius
``EARTH_RADIUS_KM``; altitude never enters a distance.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AmbiguousPath

EARTH_RADIUS_KM = 6371.0

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}

# precisions used by the extended observation grids
COARSE_PRECISION = 2
FINE_PRECISION = 3


class GeoPoint(NamedTuple):
    lat: float
    lon: float
    alt: float = 0.0


def wrap_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    wrapped = (lon + 180.0) % 360.0 - 180.0
    # keep +180 representable when the input was exactly +180
    if wrapped == -180.0 and lon > 0:
        return 180.0
    return wrapped


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lat2 = math.radians(a[0]), math.radians(b[0])
    dlat = lat2 - lat1
    dlon = math.radians(b[1] - a[1])
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def haversine_pairwise(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Symmetric matrix of haversine distances (km) between all point pairs."""
    phi = np.radians(np.asarray(lats, dtype=float))
    lam = np.radians(np.asarray(lons, dtype=float))
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    h = np.sin(dphi / 2) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2) ** 2
    np.clip(h, 0.0, 1.0, out=h)
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
    # exact symmetry, independent of rounding order
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def bearing_deg(a: GeoPoint, b: GeoPoint) -> float:
    """Initial great-circle bearing from a to b, degrees clockwise from north in [0, 360)."""
    lat1, lat2 = math.radians(a[0]), math.radians(b[0])
    dlon = math.radians(b[1] - a[1])
    y = math.sin(dlon) * math.cos(lat2)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    return math.degrees(math.atan2(y, x)) % 360.0


def _to_unit(p: GeoPoint) -> np.ndarray:
    lat, lon = math.radians(p[0]), math.radians(p[1])
    return np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])


def interpolate(a: GeoPoint, b: GeoPoint, frac: float) -> GeoPoint:
    """Point a fraction ``frac`` of the way from a to b along the great circle.

    Altitude is interpolated linearly. Raises AmbiguousPath for antipodal
    endpoints, where the great circle through them is not unique.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"frac must lie in [0, 1], got {frac}")
    if frac == 0.0:
        return GeoPoint(a[0], a[1], a[2])
    if frac == 1.0:
        return GeoPoint(b[0], b[1], b[2])
    alt = a[2] + (b[2] - a[2]) * frac
    u, v = _to_unit(a), _to_unit(b)
    cos_omega = float(np.clip(np.dot(u, v), -1.0, 1.0))
    omega = math.acos(cos_omega)
    sin_omega = math.sin(omega)
    if sin_omega < 1e-12:
        if cos_omega > 0:
            return GeoPoint(a[0], a[1], alt)
        raise AmbiguousPath(f"antipodal endpoints {a[:2]} and {b[:2]}")
    w = (math.sin((1 - frac) * omega) * u + math.sin(frac * omega) * v) / sin_omega
    lat = math.degrees(math.asin(max(-1.0, min(1.0, w[2]))))
    lon = wrap_lon(math.degrees(math.atan2(w[1], w[0])))
    return GeoPoint(lat, lon, alt)


def geohash(p: GeoPoint, precision: int) -> str:
    if not 1 <= precision <= 12:
        raise ValueError(f"geohash precision must be in [1, 12], got {precision}")
    lat, lon = p[0], p[1]
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bits, ch, even = 0, 0, True
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                ch = (ch << 1) | 1
                lon_lo = mid
            else:
                ch <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                ch = (ch << 1) | 1
                lat_lo = mid
            else:
                ch <<= 1
                lat_hi = mid
        even = not even
        bits += 1
        if bits == 5:
            chars.append(BASE32[ch])
            bits, ch = 0, 0
    return "".join(chars)


def geohash_bbox(code: str) -> tuple[float, float, float, float]:
    """Return (lat_min, lat_max, lon_min, lon_max) of a geohash cell."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for c in code:
        val = _DECODE[c]
        for shift in range(4, -1, -1):
            bit = (val >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return lat_lo, lat_hi, lon_lo, lon_hi


def neighbor_cells(code: str) -> list[list[str | None]]:
    """3x3 block of cells around ``code``; row 0 is north, column 0 is west.

    Cells that would fall beyond a pole are None. Longitude wraps.
    """
    lat_lo, lat_hi, lon_lo, lon_hi = geohash_bbox(code)
    dlat, dlon = lat_hi - lat_lo, lon_hi - lon_lo
    clat, clon = (lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2
    precision = len(code)
    block: list[list[str | None]] = []
    for di in (1, 0, -1):
        row: list[str | None] = []
        for dj in (-1, 0, 1):
            lat = clat + di * dlat
            if di == 0 and dj == 0:
                row.append(code)
            elif lat > 90.0 or lat < -90.0:
                row.append(None)
            else:
                row.append(geohash(GeoPoint(lat, wrap_lon(clon + dj * dlon)), precision))
        block.append(row)
    return block


def grid_counts(center: GeoPoint, others: Sequence[GeoPoint], precision: int) -> np.ndarray:
    """Count ``others`` falling in each cell of the 3x3 geohash block around ``center``."""
    block = neighbor_cells(geohash(center, precision))
    index = {code: (i, j) for i, row in enumerate(block) for j, code in enumerate(row) if code is not None}
    counts = np.zeros((3, 3), dtype=np.int64)
    for p in others:
        hit = index.get(geohash(p, precision))
        if hit is not None:
            counts[hit] += 1
    return counts

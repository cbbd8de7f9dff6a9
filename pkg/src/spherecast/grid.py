"""Equiangular spherical grids, quadrature weights and angular distances.

Latitude runs ascending in [-pi/2, pi/2], longitude ascending equispaced in
[0, 2pi). Quadrature weights follow the uniform rule mu_lat = (pi/n_lat)*cos(phi)
and mu_lon = 2pi/n_lon, so sum(mu_lat)*n_lon*mu_lon approximates the sphere
area 4pi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIST_EPS = 1e-6


@dataclass(frozen=True)
class GridSpec:
    n_lat: int
    n_lon: int
    lat: np.ndarray          # radians, ascending
    lon: np.ndarray          # radians, ascending, equispaced
    mu_lat: np.ndarray       # per-latitude quadrature weight
    mu_lon: float            # scalar longitude quadrature weight
    area_w: np.ndarray       # per-latitude cell-area weight, mean 1
    include_poles: bool

    def norm_mu_lat(self) -> np.ndarray:
        """Latitude weights normalized to sum 1 (weighted-mean weights)."""
        return self.mu_lat / self.mu_lat.sum()


@dataclass(frozen=True)
class DistanceTable:
    d_lat: np.ndarray        # (n_lat, n_lat), absolute angular difference
    d_lon: np.ndarray        # (n_lon, n_lon), wrapped into [DIST_EPS, pi]


def make_grid(n_lat: int, n_lon: int, include_poles: bool = False) -> GridSpec:
    """Build an equiangular grid.

    include_poles=True places nodes at lat = -pi/2 + k*pi/(n_lat-1) (the
    121-point style, zero quadrature weight at the poles); False places them
    at cell centers -pi/2 + (k+1/2)*pi/n_lat.
    """
    if n_lat < 2 or n_lon < 2:
        raise ValueError(f"grid needs at least 2 points per axis, got {n_lat}x{n_lon}")
    if include_poles:
        lat = -np.pi / 2 + np.arange(n_lat) * (np.pi / (n_lat - 1))
    else:
        lat = -np.pi / 2 + (np.arange(n_lat) + 0.5) * (np.pi / n_lat)
    lon = np.arange(n_lon) * (2.0 * np.pi / n_lon)
    mu_lat = (np.pi / n_lat) * np.cos(lat)
    mu_lat = np.maximum(mu_lat, 0.0)  # clip cos(+-pi/2) roundoff
    mu_lon = 2.0 * np.pi / n_lon
    area_w = _area_weights(lat)
    return GridSpec(n_lat, n_lon, lat, lon, mu_lat, mu_lon, area_w, include_poles)


def _area_weights(lat: np.ndarray) -> np.ndarray:
    """Normalized cell-area weights from sin of the cell boundaries.

    Boundaries are midpoints between adjacent nodes, with +-pi/2 as the outer
    ones; weights are normalized to mean 1.
    """
    mids = 0.5 * (lat[:-1] + lat[1:])
    upper = np.concatenate([mids, [np.pi / 2]])
    lower = np.concatenate([[-np.pi / 2], mids])
    w = np.sin(upper) - np.sin(lower)
    return w / w.mean()


def area_weights(g: GridSpec) -> np.ndarray:
    return g.area_w.copy()


def wrap_lon_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle longitude distance: |a-b| wrapped into [0, pi]."""
    d = np.abs(a[:, None] - b[None, :])
    return np.minimum(d, 2.0 * np.pi - d)


def distances(g: GridSpec) -> DistanceTable:
    """Axial angular distance tables, clamped below at DIST_EPS."""
    d_lat = np.abs(g.lat[:, None] - g.lat[None, :])
    d_lon = wrap_lon_diff(g.lon, g.lon)
    return DistanceTable(np.maximum(d_lat, DIST_EPS), np.maximum(d_lon, DIST_EPS))


def cross_distances(query: np.ndarray, key: np.ndarray, periodic: bool) -> np.ndarray:
    """Rectangular distance table between query and key coordinates."""
    if periodic:
        d = wrap_lon_diff(np.asarray(query, dtype=np.float64), np.asarray(key, dtype=np.float64))
    else:
        d = np.abs(np.asarray(query, dtype=np.float64)[:, None] - np.asarray(key, dtype=np.float64)[None, :])
    return np.maximum(d, DIST_EPS)


def sphere_area_estimate(g: GridSpec) -> float:
    """Quadrature of the constant 1 over the sphere; exact value is 4pi."""
    return float(g.mu_lat.sum() * g.n_lon * g.mu_lon)


def quadrature_integrate(g: GridSpec, values: np.ndarray) -> float:
    """Quadrature sum of a field sampled on the grid (lat, lon)."""
    return float(np.einsum("i,ij->", g.mu_lat, values) * g.mu_lon)

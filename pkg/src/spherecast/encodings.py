"""Distance, positional and coordinate encodings.

Three families live here: a sinc-like Bessel basis that turns angular
distances into learnable per-channel modulations, real spherical harmonics
used as absolute positional features, and sine-activated coordinate networks
that supply continuous query features for the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .grid import DIST_EPS
from .tensor import Tensor

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def bessel_basis(dist: np.ndarray, n_basis: int) -> np.ndarray:
    """Evaluate sqrt(2/pi)*sin(n*e)/e for n=1..n_basis.

    ``dist`` must lie in [DIST_EPS, pi]; returns shape dist.shape + (n_basis,).
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.min() < DIST_EPS * (1 - 1e-9) or d.max() > np.pi * (1 + 1e-12):
        raise ValueError(
            f"distances must lie in [{DIST_EPS}, pi], got range "
            f"[{d.min():.3e}, {d.max():.3e}]"
        )
    n = np.arange(1, n_basis + 1, dtype=np.float64)
    return SQRT_2_OVER_PI * np.sin(d[..., None] * n) / d[..., None]


@dataclass
class DistanceEncodingParams:
    """Per-axis Bessel coefficients: w is (n_basis, d), b is (d,)."""

    w: Tensor
    b: Tensor

    @property
    def n_basis(self) -> int:
        return self.w.shape[0]


def bessel_encode(dist: np.ndarray, params: DistanceEncodingParams) -> Tensor:
    """Distance modulation psi_c(e) = b_c + sum_n w_nc * sqrt(2/pi) sin(n e)/e."""
    basis = T.constant(bessel_basis(dist, params.n_basis), params.w.dtype)
    return T.einsum("ijn,nc->ijc", basis, params.w) + params.b


# ---------------------------------------------------------------------------
# Real spherical harmonics


def _recurrence_coeffs(l_max: int):
    a = np.zeros((l_max + 1, l_max + 1))
    b = np.zeros((l_max + 1, l_max + 1))
    for m in range(l_max + 1):
        amm = 1.0
        for k in range(1, m + 1):
            amm *= (2 * k + 1) / (2 * k)
        a[m, m] = math.sqrt(amm / (4.0 * math.pi))
        for l in range(m + 1, l_max + 1):
            a[l, m] = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            if l > m + 1:
                b[l, m] = -math.sqrt(
                    (2 * l + 1) * ((l - 1) ** 2 - m * m) / ((2 * l - 3) * (l * l - m * m))
                )
    return a, b


def _norm_legendre(x: np.ndarray, l_max: int) -> np.ndarray:
    """Fully normalized associated Legendre P~_lm(x) by upward recurrence.

    Returns shape (l_max+1, l_max+1, n) indexed [l, m]; entries with m > l
    stay zero. Normalization is such that Y_l0 = P~_l0.
    """
    x = np.asarray(x, dtype=np.float64)
    a, b = _recurrence_coeffs(l_max)
    s = np.sqrt(np.maximum(1.0 - x * x, 0.0))
    p = np.zeros((l_max + 1, l_max + 1) + x.shape)
    for m in range(l_max + 1):
        p[m, m] = a[m, m] * s**m
        if m + 1 <= l_max:
            p[m + 1, m] = a[m + 1, m] * x * p[m, m]
        for l in range(m + 2, l_max + 1):
            p[l, m] = a[l, m] * x * p[l - 1, m] + b[l, m] * p[l - 2, m]
    return p


def sh_feature_count(l_max: int) -> int:
    return (l_max + 1) ** 2


def real_sh_basis(lat: np.ndarray, lon: np.ndarray, l_max: int) -> np.ndarray:
    """Real spherical harmonics on the lat x lon product grid.

    Output (n_lat, n_lon, (l_max+1)^2), channels ordered l-major with m from
    -l to l. The argument of the Legendre part is sin(lat) (the cosine of
    colatitude).
    """
    if l_max < 0:
        raise ValueError("l_max must be >= 0")
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    p = _norm_legendre(np.sin(lat), l_max)  # (L+1, L+1, n_lat)
    n_lat, n_lon = lat.size, lon.size
    feats = np.zeros((n_lat, n_lon, sh_feature_count(l_max)))
    sqrt2 = math.sqrt(2.0)
    idx = 0
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            if m == 0:
                feats[:, :, idx] = p[l, 0][:, None]
            elif m > 0:
                feats[:, :, idx] = sqrt2 * p[l, m][:, None] * np.cos(m * lon)[None, :]
            else:
                feats[:, :, idx] = sqrt2 * p[l, -m][:, None] * np.sin(-m * lon)[None, :]
            idx += 1
    return feats


@dataclass
class PositionalEncodingParams:
    """SH-feature MLP: two layers mapping (l_max+1)^2 features to d channels."""

    l_max: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def sh_position_encoding(feats: np.ndarray, params: PositionalEncodingParams) -> Tensor:
    """Absolute positional encoding: SH features through a two-layer MLP."""
    h = T.matmul(T.constant(feats, params.w1.dtype), params.w1) + params.b1
    return T.matmul(T.gelu(h), params.w2) + params.b2


# ---------------------------------------------------------------------------
# Sine-activated coordinate networks


@dataclass
class SirenParams:
    """Layer weights of a sine-activated MLP; omega0 scales the first layer."""

    layers: list[tuple[Tensor, Tensor]]
    omega0: float = 30.0


def siren_basis(coords: np.ndarray, params: SirenParams,
                domain: tuple[float, float] | None = None) -> Tensor:
    """Continuous per-axis basis features at arbitrary coordinates.

    Two layers by default: x -> w2 . sin(omega0 * (w1 x + b1)) + b2; deeper
    stacks apply plain sine between hidden layers and keep the final layer
    linear. When a (lo, hi) domain is given, coordinates are mapped affinely
    onto [-1, 1] first (the standard conditioning for sine networks, whose
    omega0 assumes unit-range inputs).
    """
    x = np.asarray(coords, dtype=np.float64).reshape(-1, 1)
    if domain is not None:
        lo, hi = domain
        x = 2.0 * (x - lo) / (hi - lo) - 1.0
    h = T.constant(x, params.layers[0][0].dtype)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = T.matmul(h, w) + b
        if i == 0:
            h = T.sin(h * params.omega0)
        elif i < last:
            h = T.sin(h)
    return h

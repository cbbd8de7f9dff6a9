"""Axial factorized attention on spherical grids.

The layer runs in three stages: axial projection squeezes the field onto each
axis (weighted means with the grid quadrature weights), per-axis kernels are
formed from distance-modulated dot products of projected queries and keys,
and a tensor-matrix product applies both kernels to the full-grid values
under the spherical quadrature rule. A standard softmax attention is kept as
the dense baseline, and a rectangular variant of the kernels drives the
continuous cross-attention upsampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encodings import SirenParams, bessel_basis, siren_basis
from .grid import DistanceTable, GridSpec, cross_distances
from .tensor import Tensor


@dataclass
class AttentionConfig:
    heads: int
    head_dim: int
    leaky_slope: float = 0.01
    scale: bool = True  # 1/sqrt(head_dim) on the kernel pre-activation


@dataclass
class AxialKernelSet:
    """Per-head axial kernels: a_lat (heads, S_lat, S_lat), a_lon likewise."""

    a_lat: Tensor
    a_lon: Tensor

    @property
    def heads(self) -> int:
        return self.a_lat.shape[0]


def standard_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Dense attention: z_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys vs {v.shape[0]} values")
    scores = T.contract(q, k, ([-1], [-1])) * (1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(scores), v)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer pointwise MLP with GELU."""
    return T.matmul(T.gelu(T.matmul(x, w1) + b1), w2) + b2


def axial_project(Z: Tensor, g: GridSpec, axis: str, gamma: dict) -> Tensor:
    """Project a (S_lat, S_lon, d) field onto one axis.

    The reduction over the other axis is a weighted mean: uniform weights
    over longitude, cos(lat) quadrature weights (normalized to sum 1) over
    latitude. The result passes through the pointwise two-layer MLP gamma.
    """
    if axis == "lat":
        w = np.full(g.n_lon, 1.0 / g.n_lon)
        reduced = T.contract(Z, T.constant(w, Z.dtype), ([1], [0]))
    elif axis == "lon":
        w = g.norm_mu_lat()
        reduced = T.contract(T.constant(w, Z.dtype), Z, ([0], [0]))
    else:
        raise ValueError(f"axis must be 'lat' or 'lon', got {axis!r}")
    return mlp2(reduced, gamma["w1"], gamma["b1"], gamma["w2"], gamma["b2"])


def _heads_split(x: Tensor, heads: int, head_dim: int) -> Tensor:
    """(S, heads*head_dim) -> (heads, S, head_dim)."""
    s = x.shape[0]
    return T.transpose(T.reshape(x, (s, heads, head_dim)), (1, 0, 2))


def _axis_kernel(
    u: Tensor,
    dist: np.ndarray,
    p: dict,
    cfg: AttentionConfig,
) -> Tensor:
    """Distance-modulated kernel for one axis, vectorized over heads.

    A_ij = leakyReLU( sum_c psi_c(e_ij) Q_ic K_jc / sqrt(head_dim) ) with
    Q = LN(u Wq), K = LN(u Wk) per head and psi the per-head Bessel
    modulation of the axis distance table.
    """
    h, hd = cfg.heads, cfg.head_dim
    q = _heads_split(T.matmul(u, p["wq"]) + p["bq"], h, hd)
    k = _heads_split(T.matmul(u, p["wk"]) + p["bk"], h, hd)
    q = T.layernorm(q, p["lnq_g"], p["lnq_b"])
    k = T.layernorm(k, p["lnk_g"], p["lnk_b"])
    basis = T.constant(bessel_basis(dist, p["enc_w"].shape[1]), u.dtype)
    psi = T.einsum("ijn,hnc->hijc", basis, p["enc_w"]) + T.reshape(
        p["enc_b"], (h, 1, 1, hd)
    )
    scores = T.einsum("hijc,hic,hjc->hij", psi, q, k)
    if cfg.scale:
        scores = scores * (1.0 / math.sqrt(hd))
    return T.leaky_relu(scores, cfg.leaky_slope)


def axial_kernels(
    u_lat: Tensor,
    u_lon: Tensor,
    dt: DistanceTable,
    cfg: AttentionConfig,
    params: dict,
) -> AxialKernelSet:
    """Form both axial kernels from projected per-axis features."""
    return AxialKernelSet(
        a_lat=_axis_kernel(u_lat, dt.d_lat, params["lat"], cfg),
        a_lon=_axis_kernel(u_lon, dt.d_lon, params["lon"], cfg),
    )


def tensor_matrix_product(kernels: AxialKernelSet, V: Tensor, g: GridSpec) -> Tensor:
    """Contract both axial kernels with the value tensor under quadrature.

    V is (S_lat, S_lon, d) (shared across heads) or (S_lat, S_lon, heads,
    head_dim). The latitude contraction runs first; output matches V's
    layout with the per-head axis preserved, with a leading heads axis
    squeezed away for 3-d single-head input.
    """
    squeeze = V.ndim == 3
    if squeeze:
        if kernels.heads != 1:
            raise ValueError("3-d values require a single-head kernel set")
        V = T.reshape(V, V.shape[:2] + (1,) + V.shape[2:])
    aw_lat = kernels.a_lat * T.constant(g.mu_lat[None, None, :], V.dtype)
    aw_lon = kernels.a_lon * g.mu_lon
    inner = T.einsum("hab,bwhc->hawc", aw_lat, V)
    out = T.einsum("hxw,hawc->axhc", aw_lon, inner)
    if squeeze:
        out = T.reshape(out, (out.shape[0], out.shape[1], out.shape[3]))
    return out


def factorized_self_attention(
    Z: Tensor,
    g: GridSpec,
    dt: DistanceTable,
    cfg: AttentionConfig,
    params: dict,
    kernel_sink: list | None = None,
) -> Tensor:
    """Full factorized attention layer with residual connection.

    Queries and keys come from axial projections of a pointwise transform of
    Z; values stay on the full grid. Heads are concatenated and mapped back
    to the input width before the residual add. When kernel_sink is given the
    AxialKernelSet is appended to it (for offline inspection).
    """
    d = Z.shape[-1]
    if cfg.heads * cfg.head_dim != params["w_v"].shape[1]:
        raise ValueError("value projection width must equal heads*head_dim")
    u0 = T.matmul(Z, params["w_u"]) + params["b_u"]
    u_lat = axial_project(u0, g, "lat", params["gamma_lat"])
    u_lon = axial_project(u0, g, "lon", params["gamma_lon"])
    kernels = axial_kernels(u_lat, u_lon, dt, cfg, params)
    if kernel_sink is not None:
        kernel_sink.append(kernels)
    v = T.matmul(Z, params["w_v"]) + params["b_v"]
    v = T.reshape(v, (Z.shape[0], Z.shape[1], cfg.heads, cfg.head_dim))
    ctx = tensor_matrix_product(kernels, v, g)
    ctx = T.reshape(ctx, (Z.shape[0], Z.shape[1], cfg.heads * cfg.head_dim))
    out = T.matmul(ctx, params["w_o"]) + params["b_o"]
    if out.shape[-1] != d:
        raise ValueError("output projection must restore the input width")
    return Z + out


# ---------------------------------------------------------------------------
# Cross-attention upsampling


LAT_DOMAIN = (-np.pi / 2, np.pi / 2)
LON_DOMAIN = (0.0, 2.0 * np.pi)


def _cross_axis_kernel(
    query_coords: np.ndarray,
    key_coords: np.ndarray,
    periodic: bool,
    u_latent: Tensor,
    sp: SirenParams,
    p: dict,
    cfg: AttentionConfig,
) -> Tensor:
    """Rectangular kernel (heads, n_query, s_axis) for one axis."""
    h, hd = cfg.heads, cfg.head_dim
    qf = siren_basis(query_coords, sp, LON_DOMAIN if periodic else LAT_DOMAIN)
    q = _heads_split(T.matmul(qf, p["wq"]) + p["bq"], h, hd)
    k = _heads_split(T.matmul(u_latent, p["wk"]) + p["bk"], h, hd)
    q = T.layernorm(q, p["lnq_g"], p["lnq_b"])
    k = T.layernorm(k, p["lnk_g"], p["lnk_b"])
    dist = cross_distances(query_coords, key_coords, periodic)
    basis = T.constant(bessel_basis(dist, p["enc_w"].shape[1]), q.dtype)
    psi = T.einsum("ijn,hnc->hijc", basis, p["enc_w"]) + T.reshape(
        p["enc_b"], (h, 1, 1, hd)
    )
    scores = T.einsum("hijc,hic,hjc->hij", psi, q, k)
    if cfg.scale:
        scores = scores * (1.0 / math.sqrt(hd))
    return T.leaky_relu(scores, cfg.leaky_slope)


def _cross_common(
    z_latent: Tensor,
    g_latent: GridSpec,
    sp_lat: SirenParams,
    sp_lon: SirenParams,
    cfg: AttentionConfig,
    params: dict,
    lat_coords: np.ndarray,
    lon_coords: np.ndarray,
):
    u0 = T.matmul(z_latent, params["w_u"]) + params["b_u"]
    u_lat = axial_project(u0, g_latent, "lat", params["gamma_lat"])
    u_lon = axial_project(u0, g_latent, "lon", params["gamma_lon"])
    a_lat = _cross_axis_kernel(lat_coords, g_latent.lat, False, u_lat, sp_lat, params["lat"], cfg)
    a_lon = _cross_axis_kernel(lon_coords, g_latent.lon, True, u_lon, sp_lon, params["lon"], cfg)
    v = T.matmul(z_latent, params["w_v"]) + params["b_v"]
    v = T.reshape(v, (z_latent.shape[0], z_latent.shape[1], cfg.heads, cfg.head_dim))
    aw_lat = a_lat * T.constant(g_latent.mu_lat[None, None, :], v.dtype)
    aw_lon = a_lon * g_latent.mu_lon
    return aw_lat, aw_lon, v


def cross_attention_grid(
    z_latent: Tensor,
    g_latent: GridSpec,
    query_lat: np.ndarray,
    query_lon: np.ndarray,
    sp_lat: SirenParams,
    sp_lon: SirenParams,
    cfg: AttentionConfig,
    params: dict,
) -> Tensor:
    """Upsample the latent grid onto the product grid query_lat x query_lon."""
    aw_lat, aw_lon, v = _cross_common(
        z_latent, g_latent, sp_lat, sp_lon, cfg, params, query_lat, query_lon
    )
    inner = T.einsum("hab,bwhc->hawc", aw_lat, v)
    out = T.einsum("hxw,hawc->axhc", aw_lon, inner)
    out = T.reshape(out, (len(query_lat), len(query_lon), cfg.heads * cfg.head_dim))
    out = T.matmul(out, params["w_o"]) + params["b_o"]
    return T.layernorm(out, params["ln_g"], params["ln_b"])


def cross_attention_points(
    z_latent: Tensor,
    g_latent: GridSpec,
    query_coords: np.ndarray,
    sp_lat: SirenParams,
    sp_lon: SirenParams,
    cfg: AttentionConfig,
    params: dict,
) -> Tensor:
    """Upsample onto arbitrary (lat, lon) query points, shape (n_query, 2)."""
    pts = np.asarray(query_coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("query_coords must have shape (n_query, 2)")
    aw_lat, aw_lon, v = _cross_common(
        z_latent, g_latent, sp_lat, sp_lon, cfg, params, pts[:, 0], pts[:, 1]
    )
    out = T.einsum("hqa,hqb,abhc->qhc", aw_lat, aw_lon, v)
    out = T.reshape(out, (pts.shape[0], cfg.heads * cfg.head_dim))
    out = T.matmul(out, params["w_o"]) + params["b_o"]
    return T.layernorm(out, params["ln_g"], params["ln_b"])


# ---------------------------------------------------------------------------
# Parameter construction


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(dtype)


def linear_params(rng, d_in, d_out, std, dtype, zero=False):
    w = np.zeros((d_in, d_out), dtype) if zero else trunc_normal(rng, (d_in, d_out), std, dtype)
    return T.constant(w, dtype), T.constant(np.zeros(d_out, dtype), dtype)


def mlp2_params(rng, d_in, d_hidden, d_out, std, dtype) -> dict:
    w1, b1 = linear_params(rng, d_in, d_hidden, std, dtype)
    w2, b2 = linear_params(rng, d_hidden, d_out, std, dtype)
    return {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


def _axis_params(rng, d_in, cfg: AttentionConfig, n_basis, std, dtype, query_dim=None) -> dict:
    h, hd = cfg.heads, cfg.head_dim
    wq, bq = linear_params(rng, query_dim if query_dim else d_in, h * hd, std, dtype)
    wk, bk = linear_params(rng, d_in, h * hd, std, dtype)
    return {
        "wq": wq,
        "bq": bq,
        "wk": wk,
        "bk": bk,
        "lnq_g": T.constant(np.ones((h, 1, hd), dtype)),
        "lnq_b": T.constant(np.zeros((h, 1, hd), dtype)),
        "lnk_g": T.constant(np.ones((h, 1, hd), dtype)),
        "lnk_b": T.constant(np.zeros((h, 1, hd), dtype)),
        "enc_w": T.constant(trunc_normal(rng, (h, n_basis, hd), std, dtype)),
        "enc_b": T.constant(np.ones((h, hd), dtype)),
    }


def init_self_attention(
    rng, d_in, cfg: AttentionConfig, n_basis_lat, n_basis_lon, gamma_hidden, std, dtype
) -> dict:
    h, hd = cfg.heads, cfg.head_dim
    w_u, b_u = linear_params(rng, d_in, d_in, std, dtype)
    w_v, b_v = linear_params(rng, d_in, h * hd, std, dtype)
    w_o, b_o = linear_params(rng, h * hd, d_in, std, dtype)
    return {
        "w_u": w_u,
        "b_u": b_u,
        "gamma_lat": mlp2_params(rng, d_in, gamma_hidden, d_in, std, dtype),
        "gamma_lon": mlp2_params(rng, d_in, gamma_hidden, d_in, std, dtype),
        "lat": _axis_params(rng, d_in, cfg, n_basis_lat, std, dtype),
        "lon": _axis_params(rng, d_in, cfg, n_basis_lon, std, dtype),
        "w_v": w_v,
        "b_v": b_v,
        "w_o": w_o,
        "b_o": b_o,
    }


def init_siren(rng, widths: list[int], omega0: float, dtype) -> SirenParams:
    """Sine-network init.

    First layer uniform(-1/fan_in, 1/fan_in); hidden sine-fed layers
    sqrt(6/fan_in)/omega0; the final linear layer drops the omega0 factor
    (it is not followed by a sine, and shrinking it collapses the output
    variance).
    """
    layers = []
    n = len(widths) - 1
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == 0:
            bound = 1.0 / d_in
        elif i < n - 1:
            bound = math.sqrt(6.0 / d_in) / omega0
        else:
            bound = math.sqrt(6.0 / d_in)
        w = rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype)
        b = rng.uniform(-bound, bound, d_out).astype(dtype)
        layers.append((T.constant(w), T.constant(b)))
    return SirenParams(layers=layers, omega0=omega0)


def init_cross_attention(
    rng,
    d_latent,
    d_out,
    cfg: AttentionConfig,
    n_basis_lat,
    n_basis_lon,
    gamma_hidden,
    siren_width,
    siren_layers,
    omega0,
    std,
    dtype,
) -> tuple[dict, SirenParams, SirenParams]:
    h, hd = cfg.heads, cfg.head_dim
    w_u, b_u = linear_params(rng, d_latent, d_latent, std, dtype)
    w_v, b_v = linear_params(rng, d_latent, h * hd, std, dtype)
    w_o, b_o = linear_params(rng, h * hd, d_out, std, dtype)
    params = {
        "w_u": w_u,
        "b_u": b_u,
        "gamma_lat": mlp2_params(rng, d_latent, gamma_hidden, d_latent, std, dtype),
        "gamma_lon": mlp2_params(rng, d_latent, gamma_hidden, d_latent, std, dtype),
        "lat": _axis_params(rng, d_latent, cfg, n_basis_lat, std, dtype, query_dim=siren_width),
        "lon": _axis_params(rng, d_latent, cfg, n_basis_lon, std, dtype, query_dim=siren_width),
        "w_v": w_v,
        "b_v": b_v,
        "w_o": w_o,
        "b_o": b_o,
        "ln_g": T.constant(np.ones(d_out, dtype)),
        "ln_b": T.constant(np.zeros(d_out, dtype)),
    }
    widths = [1] + [siren_width] * siren_layers
    sp_lat = init_siren(rng, widths, omega0, dtype)
    sp_lon = init_siren(rng, widths, omega0, dtype)
    return params, sp_lat, sp_lon

"""Oracle-equivalence suite.

Runs every factorized operation against its explicit nested-loop reference on
a sweep of small grids and reports the worst relative deviation per case.
Used by the `equiv` CLI subcommand and by the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import oracles as O
from . import tensor as T
from .attention import (
    AttentionConfig,
    AxialKernelSet,
    axial_project,
    cross_attention_grid,
    cross_attention_points,
    factorized_self_attention,
    init_cross_attention,
    init_self_attention,
    standard_attention,
    tensor_matrix_product,
)
from .encodings import siren_basis
from .grid import cross_distances, distances, make_grid
from .model import _siren_view
from .oracles import cross_contract_oracle


def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), 1e-12)
    return float(np.abs(np.asarray(a, dtype=np.float64) - b).max()) / scale


def _randomize(tree: dict, rng, dtype) -> dict:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out[k] = _randomize(v, rng, dtype)
        else:
            arr = 0.4 * rng.standard_normal(v.shape)
            if k.startswith("ln") and k.endswith("_g"):
                arr = 1.0 + 0.1 * rng.standard_normal(v.shape)
            out[k] = T.constant(arr.astype(dtype))
    return out


def _np_tree(tree: dict) -> dict:
    return {
        k: (_np_tree(v) if isinstance(v, dict) else v.data.astype(np.float64))
        for k, v in tree.items()
    }


def run_equiv_suite(max_size: int = 8, dtype=np.float64, seed: int = 0) -> dict[str, float]:
    """Worst relative deviation per operation over all grids with axes <= max_size."""
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    heads, hd, d = 2, 3, 5
    cfg = AttentionConfig(heads=heads, head_dim=hd)
    worst: dict[str, float] = {}

    def note(name, dev):
        worst[name] = max(worst.get(name, 0.0), dev)

    for s_lat in range(2, max_size + 1):
        for s_lon in range(2, max_size + 1):
            g = make_grid(s_lat, s_lon)
            dt = distances(g)

            # contract: matrix product against the triple loop
            a = rng.standard_normal((s_lat, s_lon)).astype(dtype)
            b = rng.standard_normal((s_lon, 3)).astype(dtype)
            got = T.contract(T.constant(a), T.constant(b), ([1], [0])).data
            note("contract", _rel_dev(got, O.contract_oracle(a.astype(np.float64), b.astype(np.float64), ([1], [0]))))

            # standard attention
            q = rng.standard_normal((s_lat, d)).astype(dtype)
            k = rng.standard_normal((s_lon, d)).astype(dtype)
            v = rng.standard_normal((s_lon, d)).astype(dtype)
            got = standard_attention(T.constant(q), T.constant(k), T.constant(v)).data
            note("standard_attention", _rel_dev(got, O.standard_attention_oracle(
                q.astype(np.float64), k.astype(np.float64), v.astype(np.float64))))

            params = _randomize(
                init_self_attention(rng, d, cfg, 3, 3, 6, 0.4, dtype), rng, dtype
            )
            np_params = _np_tree(params)
            Z = T.constant(rng.standard_normal((s_lat, s_lon, d)).astype(dtype))

            # axial projection
            for axis in ("lat", "lon"):
                got = axial_project(Z, g, axis, params["gamma_lat"]).data
                ref = O.axial_project_oracle(
                    Z.data.astype(np.float64), g, axis, np_params["gamma_lat"]
                )
                note("axial_project", _rel_dev(got, ref))

            # tensor-matrix product with random kernels
            a_lat = rng.standard_normal((heads, s_lat, s_lat)).astype(dtype)
            a_lon = rng.standard_normal((heads, s_lon, s_lon)).astype(dtype)
            vv = rng.standard_normal((s_lat, s_lon, heads, hd)).astype(dtype)
            ks = AxialKernelSet(T.constant(a_lat), T.constant(a_lon))
            got = tensor_matrix_product(ks, T.constant(vv), g).data
            ref = O.tensor_matrix_product_oracle(
                a_lat.astype(np.float64), a_lon.astype(np.float64),
                g.mu_lat, g.mu_lon, vv.astype(np.float64))
            note("tensor_matrix_product", _rel_dev(got, ref))

            # full factorized self-attention layer
            got = factorized_self_attention(Z, g, dt, cfg, params).data
            ref = O.factorized_self_attention_oracle(
                Z.data.astype(np.float64), g, dt.d_lat, dt.d_lon,
                heads, hd, cfg.leaky_slope, cfg.scale, np_params)
            note("factorized_self_attention", _rel_dev(got, ref))

            # cross-attention upsample onto a finer grid (grid and point modes)
            cross, sp_lat, sp_lon = init_cross_attention(
                rng, d, 4, cfg, 3, 3, 6, 6, 2, 30.0, 0.4, dtype
            )
            cross = _randomize(cross, rng, dtype)
            np_cross = _np_tree(cross)
            q_lat = np.linspace(-np.pi / 2 + 0.1, np.pi / 2 - 0.1, s_lat + 1)
            q_lon = np.linspace(0, 2 * np.pi, s_lon + 2, endpoint=False)
            got = cross_attention_grid(
                Z, g, q_lat, q_lon, sp_lat, sp_lon, cfg, cross
            ).data
            ref = _cross_oracle_grid(
                Z.data.astype(np.float64), g, q_lat, q_lon, sp_lat, sp_lon, cfg, cross, np_cross
            )
            note("cross_attention_grid", _rel_dev(got, ref))

            pts = np.stack(
                [rng.uniform(-np.pi / 2, np.pi / 2, 5), rng.uniform(0, 2 * np.pi, 5)],
                axis=1,
            )
            got = cross_attention_points(Z, g, pts, sp_lat, sp_lon, cfg, cross).data
            ref = _cross_oracle_points(
                Z.data.astype(np.float64), g, pts, sp_lat, sp_lon, cfg, cross, np_cross
            )
            note("cross_attention_points", _rel_dev(got, ref))
    return worst


def _cross_kernels(z, g, coords_lat, coords_lon, sp_lat, sp_lon, cfg, cross, np_cross):
    """Oracle-side rectangular kernels built from loop primitives."""
    u0 = np.zeros((z.shape[0], z.shape[1], np_cross["w_u"].shape[1]))
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            u0[i, j] = O._linear(z[i, j], np_cross["w_u"], np_cross["b_u"])
    u_lat = O.axial_project_oracle(u0, g, "lat", np_cross["gamma_lat"])
    u_lon = O.axial_project_oracle(u0, g, "lon", np_cross["gamma_lon"])
    # Query features reuse the (already tested) sine network forward.
    from .attention import LAT_DOMAIN, LON_DOMAIN

    qf_lat = siren_basis(coords_lat, sp_lat, LAT_DOMAIN).data.astype(np.float64)
    qf_lon = siren_basis(coords_lon, sp_lon, LON_DOMAIN).data.astype(np.float64)
    d_lat = cross_distances(coords_lat, g.lat, periodic=False)
    d_lon = cross_distances(coords_lon, g.lon, periodic=True)
    a_lat = O.axis_kernel_oracle(
        qf_lat, u_lat, d_lat, np_cross["lat"], cfg.heads, cfg.head_dim,
        cfg.leaky_slope, cfg.scale)
    a_lon = O.axis_kernel_oracle(
        qf_lon, u_lon, d_lon, np_cross["lon"], cfg.heads, cfg.head_dim,
        cfg.leaky_slope, cfg.scale)
    v = np.zeros((z.shape[0], z.shape[1], cfg.heads, cfg.head_dim))
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            v[i, j] = O._linear(z[i, j], np_cross["w_v"], np_cross["b_v"]).reshape(
                cfg.heads, cfg.head_dim)
    return a_lat, a_lon, v


def _finish_cross(ctx_flat, np_cross):
    out = np.zeros((ctx_flat.shape[0], np_cross["w_o"].shape[1]))
    for i in range(ctx_flat.shape[0]):
        vec = O._linear(ctx_flat[i], np_cross["w_o"], np_cross["b_o"])
        out[i] = O._layernorm_vec(vec, np_cross["ln_g"], np_cross["ln_b"])
    return out


def _cross_oracle_grid(z, g, q_lat, q_lon, sp_lat, sp_lon, cfg, cross, np_cross):
    a_lat, a_lon, v = _cross_kernels(z, g, q_lat, q_lon, sp_lat, sp_lon, cfg, cross, np_cross)
    ctx = cross_contract_oracle(a_lat, a_lon, g.mu_lat, g.mu_lon, v, paired=False)
    nq_lat, nq_lon = len(q_lat), len(q_lon)
    flat = ctx.reshape(nq_lat * nq_lon, cfg.heads * cfg.head_dim)
    return _finish_cross(flat, np_cross).reshape(nq_lat, nq_lon, -1)


def _cross_oracle_points(z, g, pts, sp_lat, sp_lon, cfg, cross, np_cross):
    a_lat, a_lon, v = _cross_kernels(
        z, g, pts[:, 0], pts[:, 1], sp_lat, sp_lon, cfg, cross, np_cross
    )
    ctx = cross_contract_oracle(a_lat, a_lon, g.mu_lat, g.mu_lon, v, paired=True)
    flat = ctx.reshape(pts.shape[0], cfg.heads * cfg.head_dim)
    return _finish_cross(flat, np_cross)

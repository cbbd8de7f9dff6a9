"""Naive nested-loop reference implementations.

Everything here is written as explicit sums over indices, mirroring the
defining formulas rather than the vectorized code paths, so the optimized
operations can be checked against an independent evaluation. Inputs and
outputs are plain float64 numpy arrays; params dicts carry arrays with the
same layout as the corresponding layer parameters.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import GridSpec

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def contract_oracle(a: np.ndarray, b: np.ndarray, axes) -> np.ndarray:
    """Generalized contraction by explicit iteration over all index tuples."""
    axes_a = [ax % a.ndim for ax in axes[0]]
    axes_b = [ax % b.ndim for ax in axes[1]]
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [i for i in range(b.ndim) if i not in axes_b]
    out_shape = [a.shape[i] for i in free_a] + [b.shape[i] for i in free_b]
    con_shape = [a.shape[i] for i in axes_a]
    out = np.zeros(out_shape)
    for out_idx in np.ndindex(*out_shape):
        ia = list(out_idx[: len(free_a)])
        ib = list(out_idx[len(free_a):])
        total = 0.0
        for con_idx in np.ndindex(*con_shape):
            idx_a = [0] * a.ndim
            idx_b = [0] * b.ndim
            for pos, i in zip(free_a, ia):
                idx_a[pos] = i
            for pos, i in zip(free_b, ib):
                idx_b[pos] = i
            for (pa, pb), i in zip(zip(axes_a, axes_b), con_idx):
                idx_a[pa] = i
                idx_b[pb] = i
            total += float(a[tuple(idx_a)]) * float(b[tuple(idx_b)])
        out[out_idx] = total
    return out


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[1])
    for j in range(w.shape[1]):
        s = float(b[j])
        for i in range(w.shape[0]):
            s += float(x[i]) * float(w[i, j])
        out[j] = s
    return out


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _mlp2(x: np.ndarray, p: dict) -> np.ndarray:
    h = _linear(x, p["w1"], p["b1"])
    h = np.array([_gelu(v) for v in h])
    return _linear(h, p["w2"], p["b2"])


def _layernorm_vec(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps=1e-5) -> np.ndarray:
    mu = sum(float(v) for v in x) / len(x)
    var = sum((float(v) - mu) ** 2 for v in x) / len(x)
    inv = 1.0 / math.sqrt(var + eps)
    return np.array([(float(x[i]) - mu) * inv * float(g[i]) + float(b[i]) for i in range(len(x))])


def standard_attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = []
        for j in range(nk):
            s = sum(float(q[i, c]) * float(k[j, c]) for c in range(d))
            logits.append(s / math.sqrt(d))
        m = max(logits)
        weights = [math.exp(l - m) for l in logits]
        total = sum(weights)
        for j in range(nk):
            wj = weights[j] / total
            for c in range(v.shape[1]):
                out[i, c] += wj * float(v[j, c])
    return out


def axial_project_oracle(Z: np.ndarray, g: GridSpec, axis: str, gamma: dict) -> np.ndarray:
    s_lat, s_lon, d = Z.shape
    if axis == "lat":
        weights = [1.0 / s_lon] * s_lon
        reduced = np.zeros((s_lat, d))
        for i in range(s_lat):
            for c in range(d):
                reduced[i, c] = sum(weights[j] * float(Z[i, j, c]) for j in range(s_lon))
    elif axis == "lon":
        mu = g.mu_lat / g.mu_lat.sum()
        reduced = np.zeros((s_lon, d))
        for i in range(s_lon):
            for c in range(d):
                reduced[i, c] = sum(float(mu[j]) * float(Z[j, i, c]) for j in range(s_lat))
    else:
        raise ValueError(axis)
    return np.stack([_mlp2(reduced[i], gamma) for i in range(reduced.shape[0])])


def bessel_scalar(e: float, w_col: np.ndarray, b_c: float) -> float:
    """psi_c(e) = b_c + sum_n w_nc sqrt(2/pi) sin(n e)/e, n starting at 1."""
    s = b_c
    for n in range(1, len(w_col) + 1):
        s += float(w_col[n - 1]) * SQRT_2_OVER_PI * math.sin(n * e) / e
    return s


def _leaky(x: float, slope: float) -> float:
    return x if x >= 0.0 else slope * x


def axis_kernel_oracle(
    u_q: np.ndarray,
    u_k: np.ndarray,
    dist: np.ndarray,
    p: dict,
    heads: int,
    head_dim: int,
    slope: float,
    scale: bool,
) -> np.ndarray:
    """Kernel (heads, n_q, n_k) from already-projected axis features."""
    n_q, n_k = dist.shape
    q_full = np.stack([_linear(u_q[i], p["wq"], p["bq"]) for i in range(n_q)])
    k_full = np.stack([_linear(u_k[j], p["wk"], p["bk"]) for j in range(n_k)])
    out = np.zeros((heads, n_q, n_k))
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        q = np.stack(
            [_layernorm_vec(q_full[i, sl], p["lnq_g"][h, 0], p["lnq_b"][h, 0]) for i in range(n_q)]
        )
        k = np.stack(
            [_layernorm_vec(k_full[j, sl], p["lnk_g"][h, 0], p["lnk_b"][h, 0]) for j in range(n_k)]
        )
        for i in range(n_q):
            for j in range(n_k):
                s = 0.0
                for c in range(head_dim):
                    psi = bessel_scalar(float(dist[i, j]), p["enc_w"][h, :, c], float(p["enc_b"][h, c]))
                    s += psi * float(q[i, c]) * float(k[j, c])
                if scale:
                    s /= math.sqrt(head_dim)
                out[h, i, j] = _leaky(s, slope)
    return out


def tensor_matrix_product_oracle(
    a_lat: np.ndarray,
    a_lon: np.ndarray,
    mu_lat: np.ndarray,
    mu_lon: float,
    V: np.ndarray,
) -> np.ndarray:
    """Brute force over every (i_lat, i_lon, j_lat, j_lon) tuple.

    a_lat (heads, S_lat, S_lat), a_lon (heads, S_lon, S_lon), V (S_lat,
    S_lon, heads, head_dim); output (S_lat, S_lon, heads, head_dim).
    """
    heads, s_lat, _ = a_lat.shape
    s_lon = a_lon.shape[1]
    hd = V.shape[-1]
    out = np.zeros((s_lat, s_lon, heads, hd))
    for h in range(heads):
        for i in range(s_lat):
            for x in range(s_lon):
                for c in range(hd):
                    total = 0.0
                    for j in range(s_lat):
                        for w in range(s_lon):
                            total += (
                                float(mu_lon)
                                * float(a_lon[h, x, w])
                                * float(mu_lat[j])
                                * float(a_lat[h, i, j])
                                * float(V[j, w, h, c])
                            )
                    out[i, x, h, c] = total
    return out


def factorized_self_attention_oracle(
    Z: np.ndarray,
    g: GridSpec,
    d_lat: np.ndarray,
    d_lon: np.ndarray,
    heads: int,
    head_dim: int,
    slope: float,
    scale: bool,
    params: dict,
) -> np.ndarray:
    s_lat, s_lon, d = Z.shape
    u0 = np.zeros((s_lat, s_lon, params["w_u"].shape[1]))
    for i in range(s_lat):
        for j in range(s_lon):
            u0[i, j] = _linear(Z[i, j], params["w_u"], params["b_u"])
    u_lat = axial_project_oracle(u0, g, "lat", params["gamma_lat"])
    u_lon = axial_project_oracle(u0, g, "lon", params["gamma_lon"])
    a_lat = axis_kernel_oracle(u_lat, u_lat, d_lat, params["lat"], heads, head_dim, slope, scale)
    a_lon = axis_kernel_oracle(u_lon, u_lon, d_lon, params["lon"], heads, head_dim, slope, scale)
    v = np.zeros((s_lat, s_lon, heads, head_dim))
    for i in range(s_lat):
        for j in range(s_lon):
            row = _linear(Z[i, j], params["w_v"], params["b_v"])
            v[i, j] = row.reshape(heads, head_dim)
    ctx = tensor_matrix_product_oracle(a_lat, a_lon, g.mu_lat, g.mu_lon, v)
    out = np.zeros_like(Z)
    for i in range(s_lat):
        for j in range(s_lon):
            flat = ctx[i, j].reshape(heads * head_dim)
            out[i, j] = Z[i, j] + _linear(flat, params["w_o"], params["b_o"])
    return out


def cross_contract_oracle(
    a_lat: np.ndarray,
    a_lon: np.ndarray,
    mu_lat: np.ndarray,
    mu_lon: float,
    V: np.ndarray,
    paired: bool,
) -> np.ndarray:
    """Rectangular kernel contraction.

    a_lat (heads, n_qlat, s_lat), a_lon (heads, n_qlon, s_lon). With
    paired=True both kernels share the query index (scattered points);
    otherwise queries form the product grid.
    """
    heads, n_qlat, s_lat = a_lat.shape
    _, n_qlon, s_lon = a_lon.shape
    hd = V.shape[-1]
    if paired:
        assert n_qlat == n_qlon
        out = np.zeros((n_qlat, heads, hd))
        for h in range(heads):
            for q in range(n_qlat):
                for c in range(hd):
                    total = 0.0
                    for a in range(s_lat):
                        for b in range(s_lon):
                            total += (
                                float(mu_lat[a])
                                * float(a_lat[h, q, a])
                                * float(mu_lon)
                                * float(a_lon[h, q, b])
                                * float(V[a, b, h, c])
                            )
                    out[q, h, c] = total
        return out
    out = np.zeros((n_qlat, n_qlon, heads, hd))
    for h in range(heads):
        for i in range(n_qlat):
            for x in range(n_qlon):
                for c in range(hd):
                    total = 0.0
                    for a in range(s_lat):
                        for b in range(s_lon):
                            total += (
                                float(mu_lat[a])
                                * float(a_lat[h, i, a])
                                * float(mu_lon)
                                * float(a_lon[h, x, b])
                                * float(V[a, b, h, c])
                            )
                    out[i, x, h, c] = total
    return out


def weighted_l1_oracle(
    pred: np.ndarray,
    target: np.ndarray,
    area_w: np.ndarray,
    lam_c: np.ndarray,
    lam_l: np.ndarray,
) -> float:
    """Quintuple-loop loss over (channel, level, time, lat, lon)."""
    n_t, n_lat, n_lon, n_lev, n_c = pred.shape
    total = 0.0
    for c in range(n_c):
        for l in range(n_lev):
            for t in range(n_t):
                for i in range(n_lat):
                    for j in range(n_lon):
                        total += (
                            float(lam_c[c])
                            * float(lam_l[l])
                            * float(area_w[i])
                            * abs(float(pred[t, i, j, l, c]) - float(target[t, i, j, l, c]))
                        )
    return total / (n_lat * n_lon * n_t)


def rmse_oracle(pred: np.ndarray, target: np.ndarray, area_w: np.ndarray) -> float:
    n_lat, n_lon = pred.shape
    total = 0.0
    for i in range(n_lat):
        for j in range(n_lon):
            diff = float(pred[i, j]) - float(target[i, j])
            total += float(area_w[i]) * diff * diff
    return math.sqrt(total / (n_lat * n_lon))


def acc_oracle(
    pred: np.ndarray, target: np.ndarray, clim: np.ndarray, area_w: np.ndarray
) -> float | None:
    n_lat, n_lon = pred.shape
    num = dp = dt = 0.0
    for i in range(n_lat):
        for j in range(n_lon):
            ap = float(pred[i, j]) - float(clim[i, j])
            at = float(target[i, j]) - float(clim[i, j])
            w = float(area_w[i])
            num += w * ap * at
            dp += w * ap * ap
            dt += w * at * at
    if dp == 0.0 or dt == 0.0:
        return None
    return num / math.sqrt(dp * dt)

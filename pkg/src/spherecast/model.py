"""Encoder-Processor-Decoder forecast model.

The encoder compresses the pressure-level axis, fuses surface and upper-air
embeddings and patchifies onto a coarse latent grid. The processor is a stack
of post-norm Transformer blocks (FFN before attention, factorized attention
inside). The decoder upsamples back to the input grid with continuous
cross-attention and predicts residuals, so a zero-initialized decoder output
makes the model an exact persistence forecaster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    cross_attention_grid,
    factorized_self_attention,
    init_cross_attention,
    init_self_attention,
    linear_params,
    mlp2,
    mlp2_params,
    trunc_normal,
)
from .encodings import PositionalEncodingParams, SirenParams, real_sh_basis, sh_feature_count, sh_position_encoding
from .grid import GridSpec, distances, make_grid
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_lat: int = 16
    n_lon: int = 32
    include_poles: bool = False
    n_levels: int = 3
    n_surface_vars: int = 2
    n_upper_vars: int = 2
    n_static: int = 0
    base_dim: int = 32
    processor_dim: int = 64
    n_blocks: int = 2
    heads: int = 4
    head_dim: int = 16
    cross_heads: int = 4
    cross_head_dim: int = 16
    patch_lat: int = 2
    patch_lon: int = 2
    ffn_expansion: int = 6
    activation: str = "gelu"
    proj_mlp_expansion: int = 6
    cross_proj_hidden: int = 0  # 0 -> proj_mlp_expansion * processor_dim
    n_basis_lat: int = 8
    n_basis_lon: int = 16
    cross_n_basis_lat: int = 8
    cross_n_basis_lon: int = 16
    l_max: int = 4
    pos_hidden: int = 0  # 0 -> base_dim
    pos_encoding: bool = True
    pos_per_block: bool = True
    siren_width: int = 64
    siren_layers: int = 2
    omega0: float = 30.0
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.patch_lat < 1 or self.patch_lon < 1:
            raise ValueError("patch sizes must be >= 1")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def latent_lat(self) -> int:
        return -(-self.n_lat // self.patch_lat)

    @property
    def latent_lon(self) -> int:
        return -(-self.n_lon // self.patch_lon)

    @property
    def attn_cfg(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.head_dim, self.leaky_slope, True)

    @property
    def cross_cfg(self) -> AttentionConfig:
        return AttentionConfig(self.cross_heads, self.cross_head_dim, self.leaky_slope, True)

    @property
    def pos_hidden_dim(self) -> int:
        return self.pos_hidden if self.pos_hidden > 0 else self.base_dim


@dataclass
class NormStats:
    surface_mean: np.ndarray  # (n_surface_vars,)
    surface_std: np.ndarray
    upper_mean: np.ndarray    # (n_levels, n_upper_vars)
    upper_std: np.ndarray


@dataclass
class FieldState:
    """Surface and upper-air fields on one grid at one timestamp (normalized)."""

    surface: np.ndarray  # (n_lat, n_lon, n_surface_vars)
    upper: np.ndarray    # (n_lat, n_lon, n_levels, n_upper_vars)
    stats: NormStats | None = None


def compute_stats(surfaces: np.ndarray, uppers: np.ndarray) -> NormStats:
    """Per-variable (and per-level) mean/std over a (time, lat, lon, ...) stack."""
    ax3 = (0, 1, 2)
    s_std = surfaces.std(axis=ax3)
    u_std = uppers.std(axis=ax3)
    return NormStats(
        surface_mean=surfaces.mean(axis=ax3),
        surface_std=np.where(s_std > 0, s_std, 1.0),
        upper_mean=uppers.mean(axis=ax3),
        upper_std=np.where(u_std > 0, u_std, 1.0),
    )


def normalize(surface: np.ndarray, upper: np.ndarray, stats: NormStats) -> FieldState:
    return FieldState(
        surface=(surface - stats.surface_mean) / stats.surface_std,
        upper=(upper - stats.upper_mean) / stats.upper_std,
        stats=stats,
    )


def denormalize(state: FieldState) -> tuple[np.ndarray, np.ndarray]:
    if state.stats is None:
        raise ValueError("state carries no normalization stats")
    s = state.surface * state.stats.surface_std + state.stats.surface_mean
    u = state.upper * state.stats.upper_std + state.stats.upper_mean
    return s, u


# ---------------------------------------------------------------------------
# Building blocks


def height_compress(upper: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Collapse (..., n_levels, d_in) to (..., d): a level-spanning linear map."""
    lead = upper.shape[:-2]
    n_levels, d_in = upper.shape[-2:]
    if n_levels * d_in != w.shape[0]:
        raise ValueError(
            f"compress weights expect {w.shape[0]} inputs, field has "
            f"{n_levels} levels x {d_in} channels"
        )
    flat = T.reshape(upper, lead + (n_levels * d_in,))
    return T.matmul(flat, w) + b


def height_recover(z2d: Tensor, w: Tensor, b: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Expand channels by n_levels, reshape, then per-level affine modulation."""
    lead = z2d.shape[:-1]
    d = z2d.shape[-1]
    n_levels = w.shape[1] // d
    expanded = T.matmul(z2d, w) + b
    cube = T.reshape(expanded, lead + (n_levels, d))
    return cube * alpha + beta


def patchify(Z: Tensor, p_lat: int, p_lon: int, w: Tensor, b: Tensor) -> Tensor:
    """Non-overlapping patch embedding with zero padding on the high edges."""
    n_lat, n_lon, d = Z.shape
    pad_lat = (-n_lat) % p_lat
    pad_lon = (-n_lon) % p_lon
    if pad_lat or pad_lon:
        Z = T.pad_end(Z, (pad_lat, pad_lon, 0))
    nl = (n_lat + pad_lat) // p_lat
    nw = (n_lon + pad_lon) // p_lon
    Z = T.reshape(Z, (nl, p_lat, nw, p_lon, d))
    Z = T.transpose(Z, (0, 2, 1, 3, 4))
    Z = T.reshape(Z, (nl, nw, p_lat * p_lon * d))
    return T.matmul(Z, w) + b


def transformer_block(
    Z: Tensor,
    g_latent: GridSpec,
    dt_latent,
    sh_feats: np.ndarray,
    cfg: ModelConfig,
    params: dict,
    kernel_sink: list | None = None,
) -> Tensor:
    """Post-norm block: FFN on (features + positional encoding), then attention."""
    h = Z
    if cfg.pos_encoding:
        pe = PositionalEncodingParams(
            cfg.l_max, params["pos"]["w1"], params["pos"]["b1"],
            params["pos"]["w2"], params["pos"]["b2"],
        )
        h = Z + sh_position_encoding(sh_feats, pe)
    z1 = Z + mlp2(h, params["ffn"]["w1"], params["ffn"]["b1"], params["ffn"]["w2"], params["ffn"]["b2"])
    z2 = factorized_self_attention(
        z1, g_latent, dt_latent, cfg.attn_cfg, params["attn"], kernel_sink
    )
    return T.layernorm(z2, params["ln_g"], params["ln_b"])


# ---------------------------------------------------------------------------
# Parameter tree helpers


def flatten_params(tree: dict, prefix: str = "") -> dict[str, Tensor]:
    flat: dict[str, Tensor] = {}
    for key, val in tree.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(flatten_params(val, name + "/"))
        else:
            if name in flat:
                raise ValueError(f"duplicate parameter name {name}")
            flat[name] = val
    return flat


def unflatten_params(flat: dict[str, Tensor]) -> dict:
    tree: dict = {}
    for name, val in flat.items():
        node = tree
        parts = name.split("/")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = val
    return tree


def param_count(tree: dict) -> int:
    return sum(t.size for t in flatten_params(tree).values())


def map_params(tree: dict, fn) -> dict:
    return {
        k: (map_params(v, fn) if isinstance(v, dict) else fn(v))
        for k, v in tree.items()
    }


def _siren_tree(sp: SirenParams) -> dict:
    return {f"l{i}": {"w": w, "b": b} for i, (w, b) in enumerate(sp.layers)}


def _siren_view(tree: dict, omega0: float) -> SirenParams:
    layers = [(tree[f"l{i}"]["w"], tree[f"l{i}"]["b"]) for i in range(len(tree))]
    return SirenParams(layers=layers, omega0=omega0)


def init_params(
    cfg: ModelConfig,
    seed: int = 0,
    dtype=np.float32,
    std: float = 0.02,
    zero_final: bool = True,
) -> dict:
    """Fresh parameter tree. zero_final makes the initial model an identity
    (persistence) map by zeroing the decoder output layers."""
    rng = np.random.default_rng(seed)
    base, proc = cfg.base_dim, cfg.processor_dim
    enc_in = 2 * base + (base if cfg.n_static else 0)

    def lin(d_in, d_out, zero=False):
        w, b = linear_params(rng, d_in, d_out, std, dtype, zero=zero)
        return {"w": w, "b": b}

    encoder = {
        "surf_embed": lin(cfg.n_surface_vars, base),
        "upper_compress": lin(cfg.n_levels * cfg.n_upper_vars, base),
        "fuse": mlp2_params(rng, enc_in, base, base, std, dtype),
        "patch": lin(cfg.patch_lat * cfg.patch_lon * base, proc),
    }
    if cfg.n_static:
        encoder["static_embed"] = lin(cfg.n_static, base)

    blocks = {}
    gamma_hidden = cfg.proj_mlp_expansion * proc
    for i in range(cfg.n_blocks):
        blocks[f"block{i}"] = {
            "pos": mlp2_params(rng, sh_feature_count(cfg.l_max), cfg.pos_hidden_dim, proc, std, dtype),
            "ffn": mlp2_params(rng, proc, cfg.ffn_expansion * proc, proc, std, dtype),
            "attn": init_self_attention(
                rng, proc, cfg.attn_cfg, cfg.n_basis_lat, cfg.n_basis_lon,
                gamma_hidden, std, dtype,
            ),
            "ln_g": T.constant(np.ones(proc, dtype)),
            "ln_b": T.constant(np.zeros(proc, dtype)),
        }

    cross_hidden = cfg.cross_proj_hidden or cfg.proj_mlp_expansion * proc
    cross, sp_lat, sp_lon = init_cross_attention(
        rng, proc, base, cfg.cross_cfg,
        cfg.cross_n_basis_lat, cfg.cross_n_basis_lon,
        cross_hidden, cfg.siren_width, cfg.siren_layers,
        cfg.omega0, std, dtype,
    )
    decoder = {
        "cross": cross,
        "siren_lat": _siren_tree(sp_lat),
        "siren_lon": _siren_tree(sp_lon),
        "surf_head": mlp2_params(rng, base, base, cfg.n_surface_vars, std, dtype),
        "upper_head": mlp2_params(rng, base, base, base, std, dtype),
        "recover": lin(base, cfg.n_levels * base),
        "film_alpha": T.constant(np.ones((cfg.n_levels, base), dtype)),
        "film_beta": T.constant(np.zeros((cfg.n_levels, base), dtype)),
        "upper_out": lin(base, cfg.n_upper_vars, zero=zero_final),
    }
    if zero_final:
        decoder["surf_head"]["w2"] = T.constant(
            np.zeros((base, cfg.n_surface_vars), dtype)
        )
        decoder["surf_head"]["b2"] = T.constant(np.zeros(cfg.n_surface_vars, dtype))

    return {"encoder": encoder, "processor": blocks, "decoder": decoder}


# ---------------------------------------------------------------------------
# The model


class NonFiniteOutputError(RuntimeError):
    pass


def _check_finite(t: Tensor, name: str):
    if not np.isfinite(t.data).all():
        raise NonFiniteOutputError(f"non-finite values in tensor {name!r}")


class ForecastModel:
    """EPD forecaster: caches grids, distance tables and SH features."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.grid = make_grid(cfg.n_lat, cfg.n_lon, cfg.include_poles)
        self.latent = make_grid(cfg.latent_lat, cfg.latent_lon, include_poles=False)
        self.dt_latent = distances(self.latent)
        self.sh_feats = real_sh_basis(self.latent.lat, self.latent.lon, cfg.l_max)
        self.params = params if params is not None else init_params(cfg, seed, self.dtype)

    def encode(self, surface: Tensor, upper: Tensor, static: Tensor | None = None) -> Tensor:
        p = self.params["encoder"]
        se = T.matmul(surface, p["surf_embed"]["w"]) + p["surf_embed"]["b"]
        uc = height_compress(upper, p["upper_compress"]["w"], p["upper_compress"]["b"])
        parts = [se, uc]
        if self.cfg.n_static:
            if static is None:
                raise ValueError("model configured with static channels but none provided")
            parts.append(T.matmul(static, p["static_embed"]["w"]) + p["static_embed"]["b"])
        cat = T.concat(parts, axis=-1)
        fused = mlp2(cat, p["fuse"]["w1"], p["fuse"]["b1"], p["fuse"]["w2"], p["fuse"]["b2"])
        return patchify(fused, self.cfg.patch_lat, self.cfg.patch_lon,
                        p["patch"]["w"], p["patch"]["b"])

    def process(self, z: Tensor, kernel_sink: list | None = None) -> Tensor:
        for i in range(self.cfg.n_blocks):
            z = transformer_block(
                z, self.latent, self.dt_latent, self.sh_feats, self.cfg,
                self.params["processor"][f"block{i}"], kernel_sink,
            )
        return z

    def collect_kernels(self, state: FieldState) -> dict[str, np.ndarray]:
        """Axial kernel matrices of every processor block for one input."""
        sink: list = []
        z = self.encode(T.constant(state.surface, self.dtype),
                        T.constant(state.upper, self.dtype))
        self.process(z, kernel_sink=sink)
        out = {}
        for i, ks in enumerate(sink):
            out[f"block{i}/lat"] = ks.a_lat.data
            out[f"block{i}/lon"] = ks.a_lon.data
        return out

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params["decoder"]
        sp_lat = _siren_view(p["siren_lat"], self.cfg.omega0)
        sp_lon = _siren_view(p["siren_lon"], self.cfg.omega0)
        up = cross_attention_grid(
            z, self.latent, self.grid.lat, self.grid.lon,
            sp_lat, sp_lon, self.cfg.cross_cfg, p["cross"],
        )
        sh = p["surf_head"]
        surf_res = mlp2(up, sh["w1"], sh["b1"], sh["w2"], sh["b2"])
        uh = p["upper_head"]
        hidden = mlp2(up, uh["w1"], uh["b1"], uh["w2"], uh["b2"])
        cube = height_recover(hidden, p["recover"]["w"], p["recover"]["b"],
                              p["film_alpha"], p["film_beta"])
        upper_res = T.matmul(cube, p["upper_out"]["w"]) + p["upper_out"]["b"]
        return surf_res, upper_res

    def forward_fields(self, surface: Tensor, upper: Tensor,
                       static: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Taped forward pass on tensors; returns next (surface, upper)."""
        z = self.encode(surface, upper, static)
        z = self.process(z)
        surf_res, upper_res = self.decode(z)
        return surface + surf_res, upper + upper_res

    def forward(self, state: FieldState) -> FieldState:
        s, u = self.forward_fields(
            T.constant(state.surface, self.dtype),
            T.constant(state.upper, self.dtype),
        )
        _check_finite(s, "surface")
        _check_finite(u, "upper")
        return FieldState(surface=s.data, upper=u.data, stats=state.stats)

    def rollout(self, state: FieldState, n_steps: int) -> list[FieldState]:
        """Iterated forward; returns the n_steps intermediate states."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        states = []
        current = state
        for step in range(n_steps):
            try:
                current = self.forward(current)
            except NonFiniteOutputError as exc:
                raise NonFiniteOutputError(f"rollout step {step + 1}: {exc}") from exc
            states.append(current)
        return states

    def n_params(self) -> int:
        return param_count(self.params)

"""Registry of gradcheck cases: every differentiable operation plus the
composite layers and the full tiny model.

Each case pairs an AdjointFn with an input builder. Inputs are float64 and
scaled so gradients stay well above the finite-difference noise floor; ops
with kinks (abs, leaky units) get inputs bounded away from the kink so the
central difference never straddles it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

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
from .encodings import DistanceEncodingParams, SirenParams, bessel_encode, real_sh_basis, sh_position_encoding, siren_basis, PositionalEncodingParams
from .grid import distances, make_grid
from .model import (
    FieldState,
    ForecastModel,
    ModelConfig,
    flatten_params,
    height_compress,
    height_recover,
    init_params,
    patchify,
    transformer_block,
    unflatten_params,
)
from .tensor import AdjointFn, Tensor, tape_op
from .training import LossWeights, weighted_l1_loss_taped


@dataclass
class GradCase:
    name: str
    op: AdjointFn
    make_inputs: Callable[[int], list[Tensor]]


def _randn(rng, shape, scale=1.0):
    return T.constant(scale * rng.standard_normal(shape), np.float64)


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.standard_normal(shape) >= 0, 1.0, -1.0)
    return T.constant(mag * sign, np.float64)


def _tree_tensors(tree: dict) -> list[Tensor]:
    out = []
    for k in sorted(tree):
        v = tree[k]
        out.extend(_tree_tensors(v) if isinstance(v, dict) else [v])
    return out


def _tree_rebuild(tree: dict, it) -> dict:
    out = {}
    for k in sorted(tree):
        v = tree[k]
        out[k] = _tree_rebuild(v, it) if isinstance(v, dict) else next(it)
    return out


def _randomized_tree(tree: dict, rng, scale=0.4) -> dict:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out[k] = _randomized_tree(v, rng, scale)
        else:
            arr = scale * rng.standard_normal(v.shape)
            if k.startswith("ln") and k.endswith("_g"):
                arr = 1.0 + 0.1 * rng.standard_normal(v.shape)
            out[k] = T.constant(arr, np.float64)
    return out


def _primitive_cases() -> list[GradCase]:
    cases = [
        GradCase("add", tape_op("add", lambda a, b: a + b),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4)),
                            _randn(np.random.default_rng(s + 1), (4,))]),
        GradCase("sub", tape_op("sub", lambda a, b: a - b),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4)),
                            _randn(np.random.default_rng(s + 1), (3, 4))]),
        GradCase("mul", tape_op("mul", T.mul),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4)),
                            _randn(np.random.default_rng(s + 1), (3, 1))]),
        GradCase("scale", tape_op("scale", lambda a: a * 2.5),
                 lambda s: [_randn(np.random.default_rng(s), (5,))]),
        GradCase("square", tape_op("square", T.square),
                 lambda s: [_randn(np.random.default_rng(s), (5,))]),
        GradCase("absval", tape_op("absval", T.absval),
                 lambda s: [_away_from_zero(np.random.default_rng(s), (4, 3))]),
        GradCase("sin", tape_op("sin", T.sin),
                 lambda s: [_randn(np.random.default_rng(s), (6,))]),
        GradCase("gelu", tape_op("gelu", T.gelu),
                 lambda s: [_randn(np.random.default_rng(s), (8,))]),
        GradCase("leaky_relu", tape_op("leaky_relu", lambda a: T.leaky_relu(a, 0.01)),
                 lambda s: [_away_from_zero(np.random.default_rng(s), (4, 4))]),
        GradCase("softmax", tape_op("softmax", T.softmax),
                 lambda s: [_randn(np.random.default_rng(s), (5,))]),
        GradCase("layernorm", tape_op("layernorm", T.layernorm),
                 lambda s: [_randn(np.random.default_rng(s), (3, 6)),
                            _randn(np.random.default_rng(s + 1), (6,), 0.5),
                            _randn(np.random.default_rng(s + 2), (6,), 0.5)]),
        GradCase("reduce_sum", tape_op("reduce_sum", lambda a: T.reduce_sum(a, axis=1)),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4, 2))]),
        GradCase("reduce_mean", tape_op("reduce_mean", lambda a: T.reduce_mean(a)),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4))]),
        GradCase("reshape", tape_op("reshape", lambda a: T.reshape(a, (6, 2))),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4))]),
        GradCase("transpose", tape_op("transpose", lambda a: T.transpose(a, (1, 0, 2))),
                 lambda s: [_randn(np.random.default_rng(s), (2, 3, 4))]),
        GradCase("concat", tape_op("concat", lambda a, b: T.concat([a, b], axis=1)),
                 lambda s: [_randn(np.random.default_rng(s), (2, 3)),
                            _randn(np.random.default_rng(s + 1), (2, 2))]),
        GradCase("pad_end", tape_op("pad_end", lambda a: T.pad_end(a, (1, 2))),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4))]),
        GradCase("contract", tape_op("contract", lambda a, b: T.contract(a, b, ([1, 2], [0, 1]))),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4, 2)),
                            _randn(np.random.default_rng(s + 1), (4, 2, 5))]),
        GradCase("matmul", tape_op("matmul", T.matmul),
                 lambda s: [_randn(np.random.default_rng(s), (3, 4)),
                            _randn(np.random.default_rng(s + 1), (4, 5))]),
        GradCase(
            "einsum_3op",
            tape_op("einsum_3op", lambda p, q, k: T.einsum("hijc,hic,hjc->hij", p, q, k)),
            lambda s: [
                _randn(np.random.default_rng(s), (2, 3, 4, 5)),
                _randn(np.random.default_rng(s + 1), (2, 3, 5)),
                _randn(np.random.default_rng(s + 2), (2, 4, 5)),
            ],
        ),
    ]
    return cases


def _encoding_cases() -> list[GradCase]:
    g = make_grid(5, 6)
    dt = distances(g)

    def bessel_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (4, 3)), _randn(rng, (3,))]

    def bessel_fn(w, b):
        return bessel_encode(dt.d_lat, DistanceEncodingParams(w, b))

    def sh_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (9, 4), 0.4), _randn(rng, (4,), 0.4),
                _randn(rng, (4, 3), 0.4), _randn(rng, (3,), 0.4)]

    feats = real_sh_basis(g.lat, g.lon, 2)

    def sh_fn(w1, b1, w2, b2):
        return sh_position_encoding(feats, PositionalEncodingParams(2, w1, b1, w2, b2))

    coords = np.linspace(0.0, 2 * np.pi, 7, endpoint=False)

    def siren_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (1, 5), 0.3), _randn(rng, (5,), 0.3),
                _randn(rng, (5, 4), 0.3), _randn(rng, (4,), 0.3)]

    def siren_fn(w1, b1, w2, b2):
        return siren_basis(coords, SirenParams([(w1, b1), (w2, b2)], omega0=3.0))

    return [
        GradCase("bessel_encode", tape_op("bessel_encode", bessel_fn), bessel_inputs),
        GradCase("sh_position_encoding", tape_op("sh_position_encoding", sh_fn), sh_inputs),
        GradCase("siren_basis", tape_op("siren_basis", siren_fn), siren_inputs),
    ]


def _attention_cases() -> list[GradCase]:
    cfg = AttentionConfig(heads=2, head_dim=3)
    g = make_grid(6, 4)
    dt = distances(g)
    d = 5
    template = init_self_attention(
        np.random.default_rng(0), d, cfg, 3, 3, 6, 0.4, np.float64
    )

    def attn_inputs(s):
        rng = np.random.default_rng(s)
        tree = _randomized_tree(template, rng)
        return [_randn(rng, (6, 4, d))] + _tree_tensors(tree)

    def attn_fn(z, *flat):
        tree = _tree_rebuild(template, iter(flat))
        return factorized_self_attention(z, g, dt, cfg, tree)

    def proj_inputs(s):
        rng = np.random.default_rng(s)
        return [
            _randn(rng, (6, 4, d)),
            _randn(rng, (d, 6), 0.4), _randn(rng, (6,), 0.4),
            _randn(rng, (6, d), 0.4), _randn(rng, (d,), 0.4),
        ]

    def proj_fn(z, w1, b1, w2, b2):
        gamma = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
        return axial_project(z, g, "lon", gamma)

    def tmp_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (2, 6, 6)), _randn(rng, (2, 4, 4)), _randn(rng, (6, 4, 2, 3))]

    def tmp_fn(a_lat, a_lon, v):
        return tensor_matrix_product(AxialKernelSet(a_lat, a_lon), v, g)

    def std_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (5, 4)), _randn(rng, (6, 4)), _randn(rng, (6, 4))]

    cross_template, sp_lat_t, sp_lon_t = init_cross_attention(
        np.random.default_rng(1), d, 4, cfg, 3, 3, 6, 5, 2, 3.0, 0.4, np.float64
    )
    q_lat = np.linspace(-1.2, 1.2, 7)
    q_lon = np.linspace(0, 2 * np.pi, 9, endpoint=False)
    pts = np.stack([np.linspace(-1.0, 1.0, 5), np.linspace(0.3, 5.9, 5)], axis=1)

    def cross_tree_inputs(s):
        rng = np.random.default_rng(s)
        tree = _randomized_tree(cross_template, rng)
        sirens = [
            _randn(rng, t.shape, 0.4)
            for sp in (sp_lat_t, sp_lon_t)
            for wb in sp.layers
            for t in wb
        ]
        return [_randn(rng, (6, 4, d))] + _tree_tensors(tree) + sirens

    def _unpack_cross(flat):
        n_tree = len(_tree_tensors(cross_template))
        tree = _tree_rebuild(cross_template, iter(flat[:n_tree]))
        rest = list(flat[n_tree:])
        sp_lat = SirenParams([(rest[0], rest[1]), (rest[2], rest[3])], omega0=3.0)
        sp_lon = SirenParams([(rest[4], rest[5]), (rest[6], rest[7])], omega0=3.0)
        return tree, sp_lat, sp_lon

    def cross_grid_fn(z, *flat):
        tree, sp_lat, sp_lon = _unpack_cross(flat)
        return cross_attention_grid(z, g, q_lat, q_lon, sp_lat, sp_lon, cfg, tree)

    def cross_points_fn(z, *flat):
        tree, sp_lat, sp_lon = _unpack_cross(flat)
        return cross_attention_points(z, g, pts, sp_lat, sp_lon, cfg, tree)

    return [
        GradCase("axial_project", tape_op("axial_project", proj_fn), proj_inputs),
        GradCase("tensor_matrix_product", tape_op("tensor_matrix_product", tmp_fn), tmp_inputs),
        GradCase("standard_attention", tape_op("standard_attention", standard_attention), std_inputs),
        GradCase("factorized_self_attention", tape_op("factorized_self_attention", attn_fn), attn_inputs),
        GradCase("cross_attention_grid", tape_op("cross_attention_grid", cross_grid_fn), cross_tree_inputs),
        GradCase("cross_attention_points", tape_op("cross_attention_points", cross_points_fn), cross_tree_inputs),
    ]


def _model_cases() -> list[GradCase]:
    def hc_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (2, 2, 3, 4)), _randn(rng, (12, 5), 0.4), _randn(rng, (5,), 0.4)]

    def hr_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (2, 2, 4)), _randn(rng, (4, 12), 0.4), _randn(rng, (12,), 0.4),
                _randn(rng, (3, 4), 0.5), _randn(rng, (3, 4), 0.5)]

    def patch_inputs(s):
        rng = np.random.default_rng(s)
        return [_randn(rng, (5, 6, 3)), _randn(rng, (12, 4), 0.4), _randn(rng, (4,), 0.4)]

    tiny = tiny_model_config()
    block_cfg = ModelConfig(
        n_lat=12, n_lon=8, n_blocks=1, base_dim=4, processor_dim=6,
        heads=2, head_dim=3, cross_heads=2, cross_head_dim=3,
        n_basis_lat=3, n_basis_lon=3, cross_n_basis_lat=3, cross_n_basis_lon=3,
        l_max=2, siren_width=5, ffn_expansion=2, proj_mlp_expansion=1,
    )
    block_model = ForecastModel(
        block_cfg,
        params=init_params(block_cfg, seed=3, dtype=np.float64, std=0.4, zero_final=False),
        dtype=np.float64,
    )
    block_template = block_model.params["processor"]["block0"]

    def block_inputs(s):
        rng = np.random.default_rng(s)
        tree = _randomized_tree(block_template, rng)
        return [_randn(rng, (block_cfg.latent_lat, block_cfg.latent_lon, 6))] + _tree_tensors(tree)

    def block_fn(z, *flat):
        tree = _tree_rebuild(block_template, iter(flat))
        return transformer_block(
            z, block_model.latent, block_model.dt_latent, block_model.sh_feats,
            block_cfg, tree,
        )

    # Init scales and seed keep the finite-difference check conditioned:
    # pre-layernorm variances stay O(1e-2) (tiny variances put the
    # normalization in a high-curvature regime where h^2 truncation swamps
    # the tolerance) and distance-encoding coefficients stay small so the
    # kernel nonlinearity is not saturated negative (dead gradients fall to
    # the FD noise floor). Verified: min pre-LN var 3.6e-2, min |grad| 1.7e-6.
    def _scale_enc(tree, factor=0.2):
        return {
            k: (_scale_enc(v, factor) if isinstance(v, dict)
                else (T.constant(v.data * factor) if k == "enc_w" else v))
            for k, v in tree.items()
        }

    model = ForecastModel(
        tiny,
        params=_scale_enc(
            init_params(tiny, seed=25, dtype=np.float64, std=0.5, zero_final=False)
        ),
        dtype=np.float64,
    )
    names = sorted(flatten_params(model.params))
    rng0 = np.random.default_rng(11)
    surf0 = rng0.standard_normal((tiny.n_lat, tiny.n_lon, tiny.n_surface_vars))
    upper0 = rng0.standard_normal((tiny.n_lat, tiny.n_lon, tiny.n_levels, tiny.n_upper_vars))
    w = LossWeights.for_grid(model.grid, tiny.n_levels).resolve(
        tiny.n_surface_vars, tiny.n_upper_vars
    )
    # Targets offset from the initial prediction keep |pred - target| away
    # from the L1 kink for every finite-difference probe.
    base_s, base_u = model.forward_fields(
        T.constant(surf0, np.float64), T.constant(upper0, np.float64)
    )
    off = np.random.default_rng(12)
    tgt = FieldState(
        surface=base_s.data - _away_from_zero(off, base_s.shape, 0.5, 1.5).data,
        upper=base_u.data - _away_from_zero(off, base_u.shape, 0.5, 1.5).data,
    )

    def model_inputs(s):
        flat = flatten_params(model.params)
        return [T.constant(surf0, np.float64), T.constant(upper0, np.float64)] + [
            flat[k] for k in names
        ]

    def model_fn(surface, upper, *flat):
        model.params = unflatten_params(dict(zip(names, flat)))
        s, u = model.forward_fields(surface, upper)
        return weighted_l1_loss_taped([(s, u)], [tgt], w)

    def loss_inputs(s):
        rng = np.random.default_rng(s)
        base = rng.standard_normal((6, 4, 2, 3))
        return [T.constant(base + 0.0, np.float64),
                T.constant(rng.standard_normal((6, 4, 3)), np.float64)]

    g_loss = make_grid(6, 4)
    w_loss = LossWeights.for_grid(g_loss, 2).resolve(3, 3)
    rng_l = np.random.default_rng(21)
    tgt_loss = FieldState(
        surface=np.zeros((6, 4, 3)) + _away_from_zero(rng_l, (6, 4, 3), 0.5, 1.5).data,
        upper=np.zeros((6, 4, 2, 3)) + _away_from_zero(rng_l, (6, 4, 2, 3), 0.5, 1.5).data,
    )

    def loss_fn(upper, surface):
        return weighted_l1_loss_taped([(surface, upper)], [tgt_loss], w_loss)

    return [
        GradCase("height_compress", tape_op("height_compress", height_compress), hc_inputs),
        GradCase("height_recover", tape_op("height_recover", height_recover), hr_inputs),
        GradCase("patchify", tape_op("patchify", lambda z, w_, b: patchify(z, 2, 2, w_, b)), patch_inputs),
        GradCase("transformer_block", tape_op("transformer_block", block_fn), block_inputs),
        GradCase("weighted_l1_loss", tape_op("weighted_l1_loss", loss_fn), loss_inputs),
        GradCase("full_model_loss", tape_op("full_model_loss", model_fn), model_inputs),
    ]


def tiny_model_config() -> ModelConfig:
    """The 8x16-grid, 3-level, 2-block configuration used for the model gradcheck."""
    return ModelConfig(
        n_lat=8, n_lon=16, n_levels=3, n_surface_vars=2, n_upper_vars=2,
        base_dim=6, processor_dim=8, n_blocks=2, heads=2, head_dim=4,
        cross_heads=2, cross_head_dim=4, patch_lat=2, patch_lon=2,
        ffn_expansion=2, proj_mlp_expansion=1,
        n_basis_lat=3, n_basis_lon=3, cross_n_basis_lat=3, cross_n_basis_lon=3,
        l_max=2, siren_width=6, siren_layers=2,
    )


def all_cases() -> list[GradCase]:
    return _primitive_cases() + _encoding_cases() + _attention_cases() + _model_cases()

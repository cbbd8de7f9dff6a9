"""Training: weighted L1 loss, AdamW, rollout curriculum, EMA, synthetic data.

The loss follows the latitude/level/variable weighted L1 form with level
weights interpolated linearly between 0.05 and 0.065 across the level index.
Synthetic scenarios replace reanalysis data at desk scale: band-limited
spherical-harmonic fields evolved analytically under solid-body advection
and/or spectral diffusion, so every trajectory has an exact solution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encodings import real_sh_basis
from .grid import GridSpec
from .model import FieldState, ForecastModel, NormStats, compute_stats, flatten_params, normalize, unflatten_params
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Loss


def level_weights(n_levels: int) -> np.ndarray:
    """Linear interpolation from 0.05 to 0.065 across the level index."""
    if n_levels == 1:
        return np.array([0.05])
    idx = np.arange(n_levels) / (n_levels - 1)
    return 0.05 + 0.015 * idx


# Conventional per-variable weights for the reanalysis variable set.
NAMED_VARIABLE_WEIGHTS = {
    "z": 1.0, "t": 1.0, "u": 0.5, "v": 0.5, "q": 0.1,
    "t2m": 1.0, "mslp": 0.1, "u10": 0.1, "v10": 0.1,
    "tp6": 0.05, "tp24": 0.05,
}


@dataclass
class LossWeights:
    area_w: np.ndarray       # (n_lat,)
    lam_level: np.ndarray    # (n_levels,)
    lam_surface: np.ndarray  # (n_surface_vars,)
    lam_upper: np.ndarray    # (n_upper_vars,)

    @classmethod
    def for_grid(cls, g: GridSpec, n_levels: int, lam_surface=None, lam_upper=None):
        return cls(
            area_w=g.area_w,
            lam_level=level_weights(n_levels),
            lam_surface=np.asarray(lam_surface, dtype=np.float64)
            if lam_surface is not None else None,
            lam_upper=np.asarray(lam_upper, dtype=np.float64)
            if lam_upper is not None else None,
        )

    def resolve(self, n_surface: int, n_upper: int) -> "LossWeights":
        lam_s = self.lam_surface if self.lam_surface is not None else np.ones(n_surface)
        lam_u = self.lam_upper if self.lam_upper is not None else np.ones(n_upper)
        if len(lam_s) != n_surface or len(lam_u) != n_upper:
            raise ValueError("variable weight lengths do not match the field shapes")
        return LossWeights(self.area_w, self.lam_level, lam_s, lam_u)


def weighted_l1_loss(preds: list[FieldState], targets: list[FieldState], w: LossWeights) -> float:
    """Latitude/level/variable weighted L1 over a rollout window."""
    if len(preds) != len(targets) or not preds:
        raise ValueError("prediction and target sequences must match and be non-empty")
    ws = w.resolve(preds[0].surface.shape[-1], preds[0].upper.shape[-1])
    n_lat, n_lon = preds[0].surface.shape[:2]
    n_t = len(preds)
    total = 0.0
    for p, t in zip(preds, targets):
        if p.surface.shape != t.surface.shape or p.upper.shape != t.upper.shape:
            raise ValueError("prediction/target shape mismatch")
        ds = np.abs(p.surface - t.surface)
        total += np.einsum("ijc,i,c->", ds, ws.area_w, ws.lam_surface, optimize=True)
        du = np.abs(p.upper - t.upper)
        total += np.einsum(
            "ijlc,i,l,c->", du, ws.area_w, ws.lam_level, ws.lam_upper, optimize=True
        )
    return float(total) / (n_lat * n_lon * n_t)


def weighted_l1_loss_taped(
    preds: list[tuple[Tensor, Tensor]],
    targets: list[FieldState],
    w: LossWeights,
) -> Tensor:
    """Differentiable version of the rollout loss; preds are (surface, upper)."""
    ws = w.resolve(preds[0][0].shape[-1], preds[0][1].shape[-1])
    n_lat, n_lon = preds[0][0].shape[:2]
    n_t = len(preds)
    dtype = preds[0][0].dtype
    aw = T.constant(ws.area_w[:, None, None], dtype)
    lam_s = T.constant(ws.lam_surface[None, None, :], dtype)
    aw_u = T.constant(ws.area_w[:, None, None, None], dtype)
    lam_l = T.constant(ws.lam_level[None, None, :, None], dtype)
    lam_u = T.constant(ws.lam_upper[None, None, None, :], dtype)
    total = None
    for (ps, pu), tgt in zip(preds, targets):
        ds = T.absval(ps - T.constant(tgt.surface, dtype))
        term = T.reduce_sum(ds * aw * lam_s)
        du = T.absval(pu - T.constant(tgt.upper, dtype))
        term = term + T.reduce_sum(du * aw_u * lam_l * lam_u)
        total = term if total is None else total + term
    return total * (1.0 / (n_lat * n_lon * n_t))


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            step=0,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    hp: AdamWConfig,
) -> None:
    """Decoupled-weight-decay adaptive moment update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - hp.beta1**t
    c2 = 1.0 - hp.beta2**t
    for k, p in params.items():
        g = grads[k].astype(p.dtype)
        state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g
        state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * (g * g)
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        p -= lr * (m_hat / (np.sqrt(v_hat) + hp.eps) + hp.weight_decay * p)


def lr_at(step: int, total_steps: int, warmup: int, start: float, peak: float, end: float) -> float:
    """Linear warmup from start to peak, then cosine decay to end."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if warmup > 0 and step < warmup:
        return start + (peak - start) * step / warmup
    last = max(total_steps - 1, warmup + 1)
    frac = min(max((step - warmup) / (last - warmup), 0.0), 1.0)
    return end + 0.5 * (peak - end) * (1.0 + math.cos(math.pi * frac))


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float = 0.999) -> None:
    for k in shadow:
        shadow[k] = decay * shadow[k] + (1.0 - decay) * params[k]


# ---------------------------------------------------------------------------
# Rollout curriculum


@dataclass
class Curriculum:
    milestones: list[int]
    rollouts: list[int]

    def __post_init__(self):
        if len(self.milestones) != len(self.rollouts):
            raise ValueError("milestones and rollouts must pair up")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")

    def scaled(self, factor: float) -> "Curriculum":
        scaled = [int(round(m * factor)) for m in self.milestones]
        return Curriculum(scaled, list(self.rollouts))

    def rollout_at(self, step: int) -> int:
        length = self.rollouts[0]
        for m, r in zip(self.milestones, self.rollouts):
            if step >= m:
                length = r
        return length


STAGE1_CURRICULUM = Curriculum([0, 50_000], [1, 2])
STAGE2_CURRICULUM = Curriculum([0, 10_000, 20_000, 30_000, 40_000], [4, 8, 12, 16, 20])


# ---------------------------------------------------------------------------
# Synthetic spherical dynamics


@dataclass
class SyntheticScenario:
    kind: str = "advection"      # advection | diffusion | blended
    omega: float = 0.1           # angular velocity, rad per time unit
    kappa: float = 0.0           # diffusivity
    dt: float = 1.0
    l_max: int = 6
    decay_power: float = 2.0     # spectral amplitude falloff (1+l)^-p

    def __post_init__(self):
        if self.kind not in ("advection", "diffusion", "blended"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    def effective(self) -> tuple[float, float]:
        omega = self.omega if self.kind in ("advection", "blended") else 0.0
        kappa = self.kappa if self.kind in ("diffusion", "blended") else 0.0
        return omega, kappa


def _random_coeffs(rng: np.random.Generator, l_max: int, decay_power: float) -> np.ndarray:
    """Coefficients over the real SH basis, ordered (l, m=-l..l)."""
    n = (l_max + 1) ** 2
    coeffs = rng.standard_normal(n)
    idx = 0
    for l in range(l_max + 1):
        for _ in range(2 * l + 1):
            coeffs[idx] *= (1.0 + l) ** (-decay_power)
            idx += 1
    return coeffs


def evolve_coeffs(coeffs: np.ndarray, l_max: int, omega: float, kappa: float, t: float) -> np.ndarray:
    """Exact evolution: phase rotation by m*omega*t plus e^{-l(l+1)kappa t} decay."""
    out = coeffs.copy()
    idx = 0
    for l in range(l_max + 1):
        damp = math.exp(-l * (l + 1) * kappa * t)
        base = idx + l  # position of m = 0
        for m in range(1, l + 1):
            c = coeffs[base + m]
            s = coeffs[base - m]
            ang = m * omega * t
            out[base + m] = (c * math.cos(ang) - s * math.sin(ang)) * damp
            out[base - m] = (c * math.sin(ang) + s * math.cos(ang)) * damp
        out[base] = coeffs[base] * damp
        idx += 2 * l + 1
    return out


def coeff_variance(coeffs: np.ndarray) -> float:
    """Area-weighted field variance implied by the (orthonormal) coefficients."""
    return float((coeffs[1:] ** 2).sum() / (4.0 * math.pi))


def gen_synthetic(
    scenario: SyntheticScenario,
    g: GridSpec,
    n_steps: int,
    n_channels: int,
    seed: int,
) -> np.ndarray:
    """Trajectory (n_steps+1, n_lat, n_lon, n_channels), analytically evolved."""
    rng = np.random.default_rng(seed)
    basis = real_sh_basis(g.lat, g.lon, scenario.l_max)
    omega, kappa = scenario.effective()
    out = np.zeros((n_steps + 1, g.n_lat, g.n_lon, n_channels))
    for ch in range(n_channels):
        coeffs = _random_coeffs(rng, scenario.l_max, scenario.decay_power)
        for k in range(n_steps + 1):
            ck = evolve_coeffs(coeffs, scenario.l_max, omega, kappa, k * scenario.dt)
            out[k, :, :, ch] = basis @ ck
    return out


def trajectory_to_states(
    traj_surface: np.ndarray, traj_upper: np.ndarray, stats: NormStats
) -> list[FieldState]:
    """Normalize a raw (time, lat, lon, ...) trajectory into FieldStates."""
    return [
        normalize(traj_surface[k], traj_upper[k], stats)
        for k in range(traj_surface.shape[0])
    ]


@dataclass
class Dataset:
    """Normalized trajectories: lists of FieldState sequences."""

    train: list[list[FieldState]]
    val: list[list[FieldState]]
    stats: NormStats


def make_dataset(
    scenario: SyntheticScenario,
    g: GridSpec,
    n_levels: int,
    n_surface: int,
    n_upper: int,
    n_train: int,
    n_val: int,
    n_steps: int,
    seed: int,
) -> Dataset:
    """Generate raw trajectories, fit stats on the training split, normalize."""
    n_ch = n_surface + n_levels * n_upper
    raw = [
        gen_synthetic(scenario, g, n_steps, n_ch, seed + 1000 * i)
        for i in range(n_train + n_val)
    ]

    def split(tr):
        surf = tr[..., :n_surface]
        upper = tr[..., n_surface:].reshape(tr.shape[:3] + (n_levels, n_upper))
        return surf, upper

    train_parts = [split(raw[i]) for i in range(n_train)]
    val_parts = [split(raw[n_train + i]) for i in range(n_val)]
    all_s = np.concatenate([p[0] for p in train_parts], axis=0)
    all_u = np.concatenate([p[1] for p in train_parts], axis=0)
    stats = compute_stats(all_s, all_u)
    return Dataset(
        train=[trajectory_to_states(s, u, stats) for s, u in train_parts],
        val=[trajectory_to_states(s, u, stats) for s, u in val_parts],
        stats=stats,
    )


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class StageConfig:
    steps: int
    warmup: int
    start_lr: float = 1e-8
    peak_lr: float = 3e-4
    end_lr: float = 1e-7
    curriculum: Curriculum = field(default_factory=lambda: STAGE1_CURRICULUM)
    ema_decay: float | None = None
    data_fraction: float = 1.0  # sample windows from the last fraction of each trajectory


class TrainAbort(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}"
        )
        self.step = step
        self.last_checkpoint = last_checkpoint


def persistence_loss(trajectories: list[list[FieldState]], w: LossWeights, rollout: int = 1) -> float:
    """Loss of a forecaster that repeats the initial state; the baseline oracle."""
    losses = []
    for states in trajectories:
        for t0 in range(len(states) - rollout):
            preds = [states[t0]] * rollout
            targets = states[t0 + 1 : t0 + 1 + rollout]
            losses.append(weighted_l1_loss(preds, targets, w))
    return float(np.mean(losses))


def validation_loss(model: ForecastModel, trajectories: list[list[FieldState]], w: LossWeights) -> float:
    """Mean single-step weighted L1 over every transition in the val split."""
    losses = []
    for states in trajectories:
        for t0 in range(len(states) - 1):
            pred = model.forward(states[t0])
            losses.append(weighted_l1_loss([pred], [states[t0 + 1]], w))
    return float(np.mean(losses))


def _window_loss(
    model: ForecastModel,
    states: list[FieldState],
    t0: int,
    rollout: int,
    w: LossWeights,
) -> Tensor:
    s = T.constant(states[t0].surface, model.dtype)
    u = T.constant(states[t0].upper, model.dtype)
    preds = []
    for k in range(rollout):
        s, u = model.forward_fields(s, u)
        preds.append((s, u))
    targets = states[t0 + 1 : t0 + 1 + rollout]
    return weighted_l1_loss_taped(preds, targets, w)


def run_stage(
    model: ForecastModel,
    data: Dataset,
    stage: StageConfig,
    w: LossWeights,
    *,
    batch_size: int = 2,
    seed: int = 0,
    log_rows: list[dict] | None = None,
    log_every: int = 10,
    val_every: int = 200,
    checkpoint_fn=None,
    checkpoint_every: int = 500,
    adamw: AdamWConfig | None = None,
    stage_name: str = "stage1",
) -> dict[str, np.ndarray] | None:
    """Run one curriculum stage in place on model.params.

    Returns the EMA shadow when the stage uses one, else None. checkpoint_fn
    is called as checkpoint_fn(tag, params_flat) and should return a path.
    """
    adamw = adamw or AdamWConfig()
    rng = np.random.default_rng(seed)
    flat = {k: v.data.astype(model.dtype).copy() for k, v in flatten_params(model.params).items()}
    names = sorted(flat)
    opt = AdamWState.init(flat)
    shadow = {k: v.copy() for k, v in flat.items()} if stage.ema_decay else None
    last_ckpt = None

    def rebuild():
        model.params = unflatten_params({k: T.constant(flat[k]) for k in flat})

    rebuild()
    for step in range(stage.steps):
        rollout = stage.curriculum.rollout_at(step)
        lr = lr_at(step, stage.steps, stage.warmup, stage.start_lr, stage.peak_lr, stage.end_lr)
        current_flat = flatten_params(model.params)
        param_tensors = [current_flat[k] for k in names]
        grad_sum = None
        loss_val = 0.0
        for _ in range(batch_size):
            traj = data.train[rng.integers(len(data.train))]
            max_t0 = len(traj) - 1 - rollout
            lo = int((1.0 - stage.data_fraction) * max_t0) if max_t0 > 0 else 0
            t0 = int(rng.integers(lo, max_t0 + 1))
            loss = _window_loss(model, traj, t0, rollout, w)
            loss_val += float(loss.data)
            gs = T.grad(loss, param_tensors)
            if grad_sum is None:
                grad_sum = gs
            else:
                grad_sum = [a + b for a, b in zip(grad_sum, gs)]
        loss_val /= batch_size
        if not math.isfinite(loss_val):
            raise TrainAbort(step, last_ckpt)
        grads = {k: g / batch_size for k, g in zip(names, grad_sum)}
        adamw_step(flat, grads, opt, lr, adamw)
        if shadow is not None:
            ema_update(shadow, flat, stage.ema_decay)
        rebuild()

        if log_rows is not None and (step % log_every == 0 or step == stage.steps - 1):
            row = {
                "stage": stage_name,
                "step": step,
                "rollout_len": rollout,
                "lr": lr,
                "loss": loss_val,
                "val_l1": "",
            }
            if data.val and val_every and (step % val_every == 0 or step == stage.steps - 1):
                row["val_l1"] = validation_loss(model, data.val, w)
            log_rows.append(row)
        if checkpoint_fn is not None and checkpoint_every and (
            (step + 1) % checkpoint_every == 0 or step == stage.steps - 1
        ):
            last_ckpt = checkpoint_fn(f"{stage_name}_step{step + 1}", dict(flat))
    return shadow


def write_log_csv(path, rows: list[dict]):
    fields = ["stage", "step", "rollout_len", "lr", "loss", "val_l1"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

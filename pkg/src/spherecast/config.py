"""Run configuration: sections, presets, strict JSON round-trip, manifests.

A RunConfig groups grid/model/training/benchmark/scenario sections whose
defaults are the desk-scale choices; the paper preset swaps in the full-size
hyperparameters. Parsing rejects unknown keys so configs stay in sync with
the code. Manifests record the config hash, seed and library versions (no
timestamps, so identical runs produce identical manifests).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field

import numpy as np

from .bench import BenchConfig
from .model import ModelConfig
from .training import SyntheticScenario

OUT_DIR_ENV = "SPHERECAST_OUT"
THREADS_ENV = "SPHERECAST_THREADS"


@dataclass
class GridSection:
    n_lat: int = 16
    n_lon: int = 32
    include_poles: bool = False


@dataclass
class ModelSection:
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
    cross_proj_hidden: int = 0
    n_basis_lat: int = 8
    n_basis_lon: int = 16
    cross_n_basis_lat: int = 8
    cross_n_basis_lon: int = 16
    l_max: int = 4
    pos_hidden: int = 0
    pos_encoding: bool = True
    pos_per_block: bool = True
    siren_width: int = 64
    siren_layers: int = 2
    omega0: float = 30.0
    leaky_slope: float = 0.01


@dataclass
class TrainingSection:
    scale: float = 1.0 / 80.0           # global curriculum/step scaling factor
    batch_size: int = 2
    stage1_steps: int = 160_000
    stage1_warmup: int = 1600
    stage1_peak_lr: float = 3e-4
    stage2_steps: int = 50_000
    stage2_warmup: int = 500
    stage2_peak_lr: float = 3e-7
    start_lr: float = 1e-8
    end_lr: float = 1e-7
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.999
    run_stage2: bool = True
    stage2_data_fraction: float = 1.0
    log_every: int = 10
    val_every: int = 200
    checkpoint_every: int = 500
    lam_surface: list[float] | None = None
    lam_upper: list[float] | None = None


@dataclass
class ScenarioSection:
    kind: str = "advection"
    omega: float = 0.1
    kappa: float = 0.0
    dt: float = 1.0
    l_max: int = 6
    decay_power: float = 2.0
    n_train: int = 6
    n_val: int = 2
    n_steps: int = 40
    dt_hours: float = 6.0


@dataclass
class BenchmarkSection:
    resolutions: list[str] = field(
        default_factory=lambda: ["16x8", "32x16", "64x32", "128x64"]
    )
    d: int = 128
    heads: int = 1
    repeats: int = 20
    warmup: int = 5
    dtype: str = "float32"
    n_basis_lat: int = 32
    n_basis_lon: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    out_dir: str = "runs"
    threads: int = 0
    grid: GridSection = field(default_factory=GridSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_lat=self.grid.n_lat,
            n_lon=self.grid.n_lon,
            include_poles=self.grid.include_poles,
            **dataclasses.asdict(self.model),
        )

    def scenario_config(self) -> SyntheticScenario:
        s = self.scenario
        return SyntheticScenario(
            kind=s.kind, omega=s.omega, kappa=s.kappa, dt=s.dt,
            l_max=s.l_max, decay_power=s.decay_power,
        )

    def bench_config(self) -> BenchConfig:
        b = self.benchmark
        return BenchConfig(
            resolutions=[parse_resolution(r) for r in b.resolutions],
            d=b.d, heads=b.heads, repeats=b.repeats, warmup=b.warmup,
            dtype=b.dtype, n_basis_lat=b.n_basis_lat, n_basis_lon=b.n_basis_lon,
            threads=self.effective_threads(), seed=self.seed,
        )

    def effective_threads(self) -> int:
        env = os.environ.get(THREADS_ENV)
        return int(env) if env else self.threads

    def effective_out_dir(self) -> str:
        return os.environ.get(OUT_DIR_ENV, self.out_dir)


def parse_resolution(text: str) -> tuple[int, int]:
    """'LONxLAT' -> (n_lon, n_lat), matching the wide-grid naming."""
    try:
        lon, lat = text.lower().split("x")
        return int(lon), int(lat)
    except ValueError as exc:
        raise ValueError(f"bad resolution {text!r}; expected e.g. 64x32") from exc


def paper_config() -> RunConfig:
    """Full-scale hyperparameters; training this preset is out of desk budget."""
    cfg = RunConfig()
    cfg.grid = GridSection(n_lat=121, n_lon=240, include_poles=True)
    cfg.model = ModelSection(
        n_levels=13, n_surface_vars=6, n_upper_vars=5,
        base_dim=256, processor_dim=768, n_blocks=6,
        heads=16, head_dim=128, cross_heads=32, cross_head_dim=128,
        n_basis_lat=32, n_basis_lon=64,
        cross_n_basis_lat=32, cross_n_basis_lon=64,
        cross_proj_hidden=256, siren_width=256,
    )
    cfg.training = TrainingSection(scale=1.0, batch_size=8)
    return cfg


# ---------------------------------------------------------------------------
# Strict (de)serialization


def _from_dict(cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_SECTION_TYPES.get(name)):
            kwargs[name] = _from_dict(_SECTION_TYPES[name], value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "grid": GridSection,
    "model": ModelSection,
    "training": TrainingSection,
    "scenario": ScenarioSection,
    "benchmark": BenchmarkSection,
}


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True)


def config_from_json(text: str) -> RunConfig:
    return _from_dict(RunConfig, json.loads(text))


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return config_from_json(fh.read())


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def make_manifest(command: str, cfg: RunConfig) -> dict:
    from . import __version__

    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "threads": cfg.effective_threads(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "spherecast": __version__,
        },
    }


def write_manifest(path, command: str, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(make_manifest(command, cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

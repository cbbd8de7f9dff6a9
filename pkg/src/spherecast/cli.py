"""Command-line interface.

Subcommands: equiv, gradcheck, quadrature, bench, gen-data, train, rollout,
metrics, dump-kernels. Check-style commands print a JSON summary and exit 0
only if every check passes (first failure is named); file-producing commands
write a manifest (config hash, seed, versions) alongside their outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .bench import BENCH_CSV_FIELDS, bench_attention
from .config import (
    RunConfig,
    config_from_json,
    config_to_json,
    load_config,
    make_manifest,
    parse_resolution,
    paper_config,
    write_manifest,
)
from .container import read_container, write_container
from .grid import make_grid, quadrature_integrate, sphere_area_estimate
from .model import FieldState, ForecastModel, NormStats, flatten_params, unflatten_params
from .tensor import constant, gradcheck
from .training import (
    AdamWConfig,
    Curriculum,
    Dataset,
    LossWeights,
    STAGE1_CURRICULUM,
    STAGE2_CURRICULUM,
    StageConfig,
    make_dataset,
    run_stage,
    trajectory_to_states,
    write_log_csv,
)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _fail(name: str, detail: str) -> int:
    print(f"FAILED: {name}: {detail}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# Check commands


def cmd_equiv(args) -> int:
    from .equivsuite import run_equiv_suite

    dtype = np.dtype(args.dtype)
    tol = 1e-12 if dtype == np.float64 else 1e-5
    worst = run_equiv_suite(max_size=args.max_size, dtype=dtype, seed=args.seed)
    result = {
        "max_size": args.max_size,
        "dtype": str(dtype),
        "tolerance": tol,
        "cases": worst,
        "max_rel_deviation": max(worst.values()),
    }
    _print_json(result)
    for name, dev in worst.items():
        if dev > tol:
            return _fail(f"equiv/{name}", f"deviation {dev:.3e} > {tol:.0e}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_cases import all_cases

    selected = set(args.cases.split(",")) if args.cases else None
    results = {}
    for case in all_cases():
        if selected and case.name not in selected:
            continue
        err = gradcheck(case.op, case.make_inputs(args.seed), seed=args.seed + 100)
        results[case.name] = err
        print(f"{'ok' if err <= args.tol else 'FAIL':4s} {case.name:30s} {err:.3e}")
    _print_json({"tolerance": args.tol, "max_rel_error": max(results.values()), "cases": results})
    for name, err in results.items():
        if err > args.tol:
            return _fail(f"gradcheck/{name}", f"rel error {err:.3e} > {args.tol:.0e}")
    return 0


def cmd_quadrature(args) -> int:
    target = 4.0 * math.pi
    errors = {}
    for n_lat in (8, 16, 32, 64):
        g = make_grid(n_lat, 2 * n_lat)
        errors[n_lat] = abs(sphere_area_estimate(g) - target) / target
    g = make_grid(64, 128)
    cos_field = np.cos(g.lat)[:, None] * np.ones((64, 128))
    cos_err = abs(quadrature_integrate(g, cos_field) - math.pi**2) / math.pi**2
    result = {
        "sphere_area_rel_errors": {str(k): v for k, v in errors.items()},
        "cos_integral_rel_error": cos_err,
    }
    _print_json(result)
    seq = [errors[n] for n in (8, 16, 32, 64)]
    if any(b >= a for a, b in zip(seq, seq[1:])):
        return _fail("quadrature/monotone", f"errors not strictly decreasing: {seq}")
    if errors[64] > 1e-3:
        return _fail("quadrature/area", f"64-lat error {errors[64]:.2e} > 1e-3")
    if cos_err > 1e-3:
        return _fail("quadrature/cos", f"cos integral error {cos_err:.2e} > 1e-3")
    return 0


# ---------------------------------------------------------------------------
# Benchmark


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.resolutions:
        cfg.benchmark.resolutions = args.resolutions.split(",")
    if args.d:
        cfg.benchmark.d = args.d
    if args.heads:
        cfg.benchmark.heads = args.heads
    if args.repeats:
        cfg.benchmark.repeats = args.repeats
    rows = bench_attention(cfg.bench_config())
    out = args.out or os.path.join(cfg.effective_out_dir(), "bench.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out + ".manifest.json", "bench", cfg)
    _print_json({"rows": len(rows), "out": out})
    return 0


# ---------------------------------------------------------------------------
# Data / training / rollout / metrics


def _dataset_to_container(data: Dataset, path: str, cfg: RunConfig) -> None:
    def stack(split):
        surf = np.stack([np.stack([s.surface for s in traj]) for traj in split])
        upper = np.stack([np.stack([s.upper for s in traj]) for traj in split])
        return surf, upper

    tr_s, tr_u = stack(data.train)
    va_s, va_u = stack(data.val)
    arrays = {
        "train/surface": tr_s, "train/upper": tr_u,
        "val/surface": va_s, "val/upper": va_u,
        "stats/surface_mean": data.stats.surface_mean,
        "stats/surface_std": data.stats.surface_std,
        "stats/upper_mean": data.stats.upper_mean,
        "stats/upper_std": data.stats.upper_std,
    }
    meta = {
        "kind": "dataset",
        "scenario": dataclasses.asdict(cfg.scenario),
        "grid": dataclasses.asdict(cfg.grid),
    }
    write_container(path, arrays, meta)


def _dataset_from_container(path: str) -> tuple[dict, Dataset]:
    meta, arrays = read_container(path)
    stats = NormStats(
        surface_mean=arrays["stats/surface_mean"],
        surface_std=arrays["stats/surface_std"],
        upper_mean=arrays["stats/upper_mean"],
        upper_std=arrays["stats/upper_std"],
    )

    def unstack(split):
        surf, upper = arrays[f"{split}/surface"], arrays[f"{split}/upper"]
        return [
            [FieldState(surf[i, k], upper[i, k], stats) for k in range(surf.shape[1])]
            for i in range(surf.shape[0])
        ]

    return meta, Dataset(train=unstack("train"), val=unstack("val"), stats=stats)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    mc = cfg.model_config()
    g = make_grid(cfg.grid.n_lat, cfg.grid.n_lon, cfg.grid.include_poles)
    data = make_dataset(
        cfg.scenario_config(), g, mc.n_levels, mc.n_surface_vars, mc.n_upper_vars,
        cfg.scenario.n_train, cfg.scenario.n_val, cfg.scenario.n_steps, cfg.seed,
    )
    out = args.out or os.path.join(cfg.effective_out_dir(), "data.sfct")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    _dataset_to_container(data, out, cfg)
    write_manifest(out + ".manifest.json", "gen-data", cfg)
    _print_json({"out": out, "train_traj": cfg.scenario.n_train, "val_traj": cfg.scenario.n_val})
    return 0


def save_checkpoint(path: str, model: ForecastModel, cfg: RunConfig,
                    stats: NormStats | None = None,
                    ema: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"params/{k}": v.data for k, v in flatten_params(model.params).items()}
    if stats is not None:
        arrays["stats/surface_mean"] = stats.surface_mean
        arrays["stats/surface_std"] = stats.surface_std
        arrays["stats/upper_mean"] = stats.upper_mean
        arrays["stats/upper_std"] = stats.upper_std
    if ema is not None:
        arrays.update({f"ema/{k}": v for k, v in ema.items()})
    meta = {"kind": "checkpoint", "config": json.loads(config_to_json(cfg))}
    write_container(path, arrays, meta)


def load_checkpoint(path: str) -> tuple[RunConfig, ForecastModel, NormStats | None]:
    meta, arrays = read_container(path)
    cfg = config_from_json(json.dumps(meta["config"]))
    params = unflatten_params({
        k[len("params/"):]: constant(v)
        for k, v in arrays.items() if k.startswith("params/")
    })
    model = ForecastModel(cfg.model_config(), params=params, dtype=np.dtype(cfg.dtype))
    stats = None
    if "stats/surface_mean" in arrays:
        stats = NormStats(
            arrays["stats/surface_mean"], arrays["stats/surface_std"],
            arrays["stats/upper_mean"], arrays["stats/upper_std"],
        )
    return cfg, model, stats


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out_dir or cfg.effective_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    if args.data:
        _, data = _dataset_from_container(args.data)
    else:
        mc = cfg.model_config()
        g = make_grid(cfg.grid.n_lat, cfg.grid.n_lon, cfg.grid.include_poles)
        data = make_dataset(
            cfg.scenario_config(), g, mc.n_levels, mc.n_surface_vars, mc.n_upper_vars,
            cfg.scenario.n_train, cfg.scenario.n_val, cfg.scenario.n_steps, cfg.seed,
        )
    model = ForecastModel(cfg.model_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    w = LossWeights.for_grid(
        model.grid, cfg.model.n_levels, cfg.training.lam_surface, cfg.training.lam_upper
    )
    t = cfg.training
    adamw = AdamWConfig(beta1=t.beta1, beta2=t.beta2, weight_decay=t.weight_decay)
    log_rows: list[dict] = []

    def checkpoint_fn(tag, flat):
        path = os.path.join(out_dir, "checkpoint.sfct")
        save_checkpoint(path, model, cfg, data.stats)
        return path

    stages = [
        ("stage1", StageConfig(
            steps=max(1, int(round(t.stage1_steps * t.scale))),
            warmup=max(1, int(round(t.stage1_warmup * t.scale))),
            start_lr=t.start_lr, peak_lr=t.stage1_peak_lr, end_lr=t.end_lr,
            curriculum=STAGE1_CURRICULUM.scaled(t.scale),
        )),
    ]
    if t.run_stage2:
        stages.append(("stage2", StageConfig(
            steps=max(1, int(round(t.stage2_steps * t.scale))),
            warmup=max(1, int(round(t.stage2_warmup * t.scale))),
            start_lr=t.start_lr, peak_lr=t.stage2_peak_lr, end_lr=t.end_lr,
            curriculum=STAGE2_CURRICULUM.scaled(t.scale),
            ema_decay=t.ema_decay,
            data_fraction=t.stage2_data_fraction,
        )))
    ema = None
    for name, stage in stages:
        shadow = run_stage(
            model, data, stage, w,
            batch_size=t.batch_size, seed=cfg.seed, log_rows=log_rows,
            log_every=t.log_every, val_every=t.val_every,
            checkpoint_fn=checkpoint_fn, checkpoint_every=t.checkpoint_every,
            adamw=adamw, stage_name=name,
        )
        if shadow is not None:
            ema = shadow
    ckpt = os.path.join(out_dir, "checkpoint.sfct")
    save_checkpoint(ckpt, model, cfg, data.stats, ema=ema)
    write_log_csv(os.path.join(out_dir, "train_log.csv"), log_rows)
    write_manifest(os.path.join(out_dir, "manifest.json"), "train", cfg)
    final_loss = log_rows[-1]["loss"] if log_rows else None
    _print_json({"checkpoint": ckpt, "steps_logged": len(log_rows), "final_loss": final_loss})
    return 0


def cmd_rollout(args) -> int:
    cfg, model, stats = load_checkpoint(args.checkpoint)
    _, data = _dataset_from_container(args.data)
    split = data.val if args.split == "val" else data.train
    if args.traj >= len(split):
        return _fail("rollout/traj", f"trajectory {args.traj} out of range ({len(split)})")
    states = split[args.traj]
    if args.t0 + 1 > len(states):
        return _fail("rollout/t0", "initial index out of range")
    init = states[args.t0]
    preds = model.rollout(init, args.steps)
    arrays = {
        "surface": np.stack([p.surface for p in preds]),
        "upper": np.stack([p.upper for p in preds]),
    }
    if stats is not None:
        arrays.update({
            "stats/surface_mean": stats.surface_mean,
            "stats/surface_std": stats.surface_std,
            "stats/upper_mean": stats.upper_mean,
            "stats/upper_std": stats.upper_std,
        })
    meta = {
        "kind": "forecast", "split": args.split, "traj": args.traj,
        "t0": args.t0, "steps": args.steps, "dt_hours": cfg.scenario.dt_hours,
    }
    out = args.out or os.path.join(cfg.effective_out_dir(), "forecast.sfct")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_container(out, arrays, meta)
    write_manifest(out + ".manifest.json", "rollout", cfg)
    _print_json({"out": out, "steps": args.steps})
    return 0


METRICS_CSV_FIELDS = ["variable", "lead_hours", "rmse", "acc", "bias"]


def cmd_metrics(args) -> int:
    from .metrics import evaluate_forecast

    fmeta, farr = read_container(args.forecast)
    dmeta, data_arrays = read_container(args.data)
    split, traj, t0 = fmeta["split"], fmeta["traj"], fmeta["t0"]
    steps = farr["surface"].shape[0]
    ref_s = data_arrays[f"{split}/surface"][traj, t0 + 1: t0 + 1 + steps]
    ref_u = data_arrays[f"{split}/upper"][traj, t0 + 1: t0 + 1 + steps]
    if ref_s.shape[0] < steps:
        return _fail("metrics/length", "reference trajectory shorter than the forecast")
    stats = NormStats(
        data_arrays["stats/surface_mean"], data_arrays["stats/surface_std"],
        data_arrays["stats/upper_mean"], data_arrays["stats/upper_std"],
    )

    def denorm_s(x):
        return x * stats.surface_std + stats.surface_mean

    def denorm_u(x):
        return x * stats.upper_std + stats.upper_mean

    clim_s = denorm_s(data_arrays["train/surface"]).mean(axis=(0, 1))
    clim_u = denorm_u(data_arrays["train/upper"]).mean(axis=(0, 1))
    n_lat = ref_s.shape[1]
    grid_meta = dmeta.get("grid", {})
    g = make_grid(n_lat, ref_s.shape[2], grid_meta.get("include_poles", False))
    report = evaluate_forecast(
        denorm_s(farr["surface"]), denorm_u(farr["upper"]),
        denorm_s(ref_s), denorm_u(ref_u),
        clim_s, clim_u, g.area_w, fmeta.get("dt_hours", 6.0),
    )
    out = args.out or "metrics.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(report.to_csv_rows())
    _print_json({"out": out, "rows": len(report.rows)})
    return 0


def cmd_dump_kernels(args) -> int:
    if args.checkpoint:
        cfg, model, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = load_config(args.config)
        model = ForecastModel(cfg.model_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    rng = np.random.default_rng(cfg.seed)
    mc = model.cfg
    state = FieldState(
        surface=rng.standard_normal((mc.n_lat, mc.n_lon, mc.n_surface_vars)),
        upper=rng.standard_normal((mc.n_lat, mc.n_lon, mc.n_levels, mc.n_upper_vars)),
    )
    kernels = model.collect_kernels(state)
    out = args.out or os.path.join(cfg.effective_out_dir(), "kernels.sfct")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_container(out, kernels, {"kind": "kernels", "seed": cfg.seed})
    write_manifest(out + ".manifest.json", "dump-kernels", cfg)
    _print_json({"out": out, "entries": sorted(kernels)})
    return 0


def cmd_show_config(args) -> int:
    cfg = paper_config() if args.preset == "paper" else RunConfig()
    print(config_to_json(cfg))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spherecast", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("equiv", help="oracle-equivalence suite on small grids")
    s.add_argument("--max-size", type=int, default=8)
    s.add_argument("--dtype", default="float64", choices=["float32", "float64"])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_equiv)

    s = sub.add_parser("gradcheck", help="finite-difference checks of all registered ops")
    s.add_argument("--seed", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--cases", default="", help="comma-separated case names (default all)")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("quadrature", help="sphere-area quadrature convergence")
    s.set_defaults(fn=cmd_quadrature)

    s = sub.add_parser("bench", help="factorized vs standard attention benchmark")
    s.add_argument("--config")
    s.add_argument("--resolutions", help="comma-separated LONxLAT, e.g. 16x8,32x16")
    s.add_argument("--d", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("gen-data", help="generate a synthetic-scenario dataset")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train on a synthetic scenario")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset container (default: regenerate from config)")
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("rollout", help="autoregressive forecast from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val", choices=["train", "val"])
    s.add_argument("--traj", type=int, default=0)
    s.add_argument("--t0", type=int, default=0)
    s.add_argument("--steps", type=int, default=28)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_rollout)

    s = sub.add_parser("metrics", help="verification metrics for a forecast container")
    s.add_argument("--forecast", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("dump-kernels", help="serialize axial kernel matrices")
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_dump_kernels)

    s = sub.add_parser("show-config", help="print a config preset as JSON")
    s.add_argument("--preset", default="desk", choices=["desk", "paper"])
    s.set_defaults(fn=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

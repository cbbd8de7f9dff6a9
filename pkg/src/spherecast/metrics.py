"""Forecast verification metrics: area-weighted RMSE, ACC and bias.

All metrics act on a single 2-d field (one variable, one lead step) with the
per-latitude area weights; ACC correlates anomalies against a climatology and
returns None rather than NaN when an anomaly has zero variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def rmse(pred: np.ndarray, target: np.ndarray, area_w: np.ndarray) -> float:
    """Square root of the area-weighted mean squared error."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mse = np.einsum("ij,i->", diff * diff, area_w) / diff.size
    return float(np.sqrt(mse))


def acc(
    pred: np.ndarray,
    target: np.ndarray,
    climatology: np.ndarray,
    area_w: np.ndarray,
) -> float | None:
    """Area-weighted correlation of anomalies relative to the climatology."""
    ap = pred.astype(np.float64) - climatology
    at = target.astype(np.float64) - climatology
    num = np.einsum("ij,ij,i->", ap, at, area_w)
    dp = np.einsum("ij,ij,i->", ap, ap, area_w)
    dt = np.einsum("ij,ij,i->", at, at, area_w)
    if dp == 0.0 or dt == 0.0:
        return None
    return float(num / np.sqrt(dp * dt))


def bias(pred: np.ndarray, target: np.ndarray, area_w: np.ndarray) -> tuple[np.ndarray, float]:
    """Pointwise prediction-minus-truth field plus its area-weighted mean."""
    b = pred.astype(np.float64) - target.astype(np.float64)
    mean = float(np.einsum("ij,i->", b, area_w) / b.size)
    return b, mean


@dataclass
class MetricRow:
    variable: str
    lead_hours: float
    rmse: float
    acc: float | None
    bias: float


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def to_csv_rows(self) -> list[dict]:
        return [
            {
                "variable": r.variable,
                "lead_hours": r.lead_hours,
                "rmse": r.rmse,
                "acc": "" if r.acc is None else r.acc,
                "bias": r.bias,
            }
            for r in self.rows
        ]


def evaluate_forecast(
    pred_surface: np.ndarray,
    pred_upper: np.ndarray,
    ref_surface: np.ndarray,
    ref_upper: np.ndarray,
    clim_surface: np.ndarray,
    clim_upper: np.ndarray,
    area_w: np.ndarray,
    dt_hours: float,
) -> MetricReport:
    """Metrics per variable and lead step for (time, lat, lon, ...) stacks."""
    rows = []
    n_steps = pred_surface.shape[0]
    for t in range(n_steps):
        lead = (t + 1) * dt_hours
        for c in range(pred_surface.shape[-1]):
            p, r = pred_surface[t, :, :, c], ref_surface[t, :, :, c]
            _, mb = bias(p, r, area_w)
            rows.append(MetricRow(f"s{c}", lead, rmse(p, r, area_w),
                                  acc(p, r, clim_surface[:, :, c], area_w), mb))
        n_levels = pred_upper.shape[-2]
        for l in range(n_levels):
            for c in range(pred_upper.shape[-1]):
                p, r = pred_upper[t, :, :, l, c], ref_upper[t, :, :, l, c]
                _, mb = bias(p, r, area_w)
                rows.append(MetricRow(f"u{c}_l{l}", lead, rmse(p, r, area_w),
                                      acc(p, r, clim_upper[:, :, l, c], area_w), mb))
    return MetricReport(rows)

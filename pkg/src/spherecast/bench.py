"""Analytic FLOPs accounting and the factorized-vs-standard attention bench.

The counters follow fixed multiply-add formulas: the standard kernel path
(scores plus value aggregation) costs 2*N^2*d per head with N the total grid
size, while the factorized kernels cost 2*(S_lat^2 + S_lon^2)*d per head and
the two-step contraction 2*(S_lat^2*S_lon + S_lat*S_lon^2)*d per head. One
multiply-add counts as 2 FLOPs. The runtime benchmark times pure-numpy
forward passes of both attention operators at native precision, measures
allocation peaks with tracemalloc, and emits CSV rows.
"""

from __future__ import annotations

import math
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .encodings import bessel_basis
from .grid import GridSpec, distances, make_grid


@dataclass
class FlopsEntry:
    name: str
    macs: int
    peak_bytes: int


@dataclass
class FlopsProfile:
    impl: str
    entries: list[FlopsEntry]

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def peak_bytes(self) -> int:
        return max(e.peak_bytes for e in self.entries)

    def entry(self, name: str) -> FlopsEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def count_flops(
    impl: str,
    n_lat: int,
    n_lon: int,
    d: int,
    heads: int = 1,
    n_basis_lat: int = 32,
    n_basis_lon: int = 64,
    gamma_hidden: int | None = None,
    itemsize: int = 4,
) -> FlopsProfile:
    """Multiply-add counts per layer component; d is the per-head width."""
    n = n_lat * n_lon
    if impl == "standard":
        entries = [
            FlopsEntry(
                "kernel",
                2 * n * n * d * heads,
                heads * n * n * itemsize + 3 * n * d * heads * itemsize,
            )
        ]
    elif impl == "factorized":
        g = gamma_hidden if gamma_hidden is not None else d * heads
        dm = d * heads
        proj = 2 * n * dm + (n_lat + n_lon) * 2 * dm * g
        enc = (n_lat**2 * n_basis_lat + n_lon**2 * n_basis_lon) * d * heads
        kernel = 2 * (n_lat**2 + n_lon**2) * d * heads
        contraction = 2 * (n_lat**2 * n_lon + n_lat * n_lon**2) * d * heads
        psi_bytes = max(n_lat**2, n_lon**2) * d * heads * itemsize
        entries = [
            FlopsEntry("projection", proj, (n_lat + n_lon) * g * itemsize),
            FlopsEntry("distance_encoding", enc, psi_bytes),
            FlopsEntry("kernel", kernel, psi_bytes),
            FlopsEntry("contraction", contraction, heads * n * d * itemsize),
        ]
    else:
        raise ValueError(f"unknown implementation {impl!r}")
    return FlopsProfile(impl, entries)


def fit_loglog_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


# ---------------------------------------------------------------------------
# Pure-numpy forward passes (native dtype, no tape)


def standard_forward(z: np.ndarray, heads: int, head_dim: int) -> np.ndarray:
    """Dense softmax attention over the flattened grid, q = k = v = z."""
    n_lat, n_lon, dm = z.shape
    n = n_lat * n_lon
    x = z.reshape(n, heads, head_dim).transpose(1, 0, 2)  # (h, n, d)
    out = np.empty_like(x)
    scale = 1.0 / math.sqrt(head_dim)
    for h in range(heads):
        scores = (x[h] @ x[h].T) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[h] = scores @ x[h]
    return out.transpose(1, 0, 2).reshape(n_lat, n_lon, dm)


@dataclass
class BenchFactorizedParams:
    gamma_lat: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    gamma_lon: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    enc_w_lat: np.ndarray  # (heads, n_basis, d)
    enc_b_lat: np.ndarray  # (heads, d)
    enc_w_lon: np.ndarray
    enc_b_lon: np.ndarray


def make_bench_params(
    rng: np.random.Generator,
    dm: int,
    heads: int,
    head_dim: int,
    n_basis_lat: int,
    n_basis_lon: int,
    gamma_hidden: int,
    dtype,
) -> BenchFactorizedParams:
    def gamma():
        s1 = 1.0 / math.sqrt(dm)
        s2 = 1.0 / math.sqrt(gamma_hidden)
        return (
            (rng.standard_normal((dm, gamma_hidden)) * s1).astype(dtype),
            np.zeros(gamma_hidden, dtype),
            (rng.standard_normal((gamma_hidden, dm)) * s2).astype(dtype),
            np.zeros(dm, dtype),
        )

    def enc(nb):
        return (
            (rng.standard_normal((heads, nb, head_dim)) * 0.1).astype(dtype),
            np.ones((heads, head_dim), dtype),
        )

    wl, bl = enc(n_basis_lat)
    ww, bw = enc(n_basis_lon)
    return BenchFactorizedParams(gamma(), gamma(), wl, bl, ww, bw)


def _gamma_apply(x, g):
    w1, b1, w2, b2 = g
    h = x @ w1 + b1
    h *= 0.5 * (1.0 + np.tanh(0.7978845608028654 * (h + 0.044715 * h**3)))  # fast gelu
    return h @ w2 + b2


def factorized_forward(
    z: np.ndarray,
    g: GridSpec,
    basis_lat: np.ndarray,
    basis_lon: np.ndarray,
    p: BenchFactorizedParams,
    heads: int,
    head_dim: int,
    slope: float = 0.01,
) -> np.ndarray:
    """Factorized attention essence: project, modulate axial kernels, contract."""
    n_lat, n_lon, dm = z.shape
    u_lat = _gamma_apply(z.mean(axis=1), p.gamma_lat)  # (S_lat, dm)
    mu_hat = (g.mu_lat / g.mu_lat.sum()).astype(z.dtype)
    u_lon = _gamma_apply(np.einsum("i,ijc->jc", mu_hat, z), p.gamma_lon)

    def kernel(u, basis, enc_w, enc_b):
        s = u.shape[0]
        q = u.reshape(s, heads, head_dim).transpose(1, 0, 2)
        psi = np.einsum("ijn,hnc->hijc", basis, enc_w, optimize=True)
        psi += enc_b[:, None, None, :]
        scores = np.einsum("hijc,hic,hjc->hij", psi, q, q, optimize=True)
        scores *= 1.0 / math.sqrt(head_dim)
        return np.where(scores >= 0, scores, slope * scores)

    a_lat = kernel(u_lat, basis_lat, p.enc_w_lat, p.enc_b_lat)
    a_lon = kernel(u_lon, basis_lon, p.enc_w_lon, p.enc_b_lon)
    v = z.reshape(n_lat, n_lon, heads, head_dim)
    aw_lat = a_lat * g.mu_lat[None, None, :].astype(z.dtype)
    aw_lon = a_lon * z.dtype.type(g.mu_lon)
    inner = np.einsum("hab,bwhc->hawc", aw_lat, v, optimize=True)
    out = np.einsum("hxw,hawc->axhc", aw_lon, inner, optimize=True)
    return out.reshape(n_lat, n_lon, dm)


# ---------------------------------------------------------------------------
# The benchmark driver


@dataclass
class BenchConfig:
    resolutions: list[tuple[int, int]]
    d: int = 128               # per-head width
    heads: int = 1
    repeats: int = 20
    warmup: int = 5
    dtype: str = "float32"
    n_basis_lat: int = 32
    n_basis_lon: int = 64
    threads: int = 0           # 0 = leave the BLAS pool alone
    seed: int = 0


BENCH_CSV_FIELDS = [
    "impl", "n_lat", "n_lon", "d", "heads", "flops",
    "latency_ms_median", "peak_bytes", "threads", "status",
]


def _time_median(fn, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def bench_attention(cfg: BenchConfig) -> list[dict]:
    """Latency/FLOPs/memory rows for both implementations at each resolution."""
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    threads = cfg.threads
    limiter = None
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=threads)
    rows = []
    try:
        for n_lon, n_lat in cfg.resolutions:
            g = make_grid(n_lat, n_lon)
            dt = distances(g)
            dm = cfg.d * cfg.heads
            z = rng.standard_normal((n_lat, n_lon, dm)).astype(dtype)
            basis_lat = bessel_basis(dt.d_lat, cfg.n_basis_lat).astype(dtype)
            basis_lon = bessel_basis(dt.d_lon, cfg.n_basis_lon).astype(dtype)
            params = make_bench_params(
                rng, dm, cfg.heads, cfg.d, cfg.n_basis_lat, cfg.n_basis_lon, dm, dtype
            )
            runs = {
                "standard": lambda: standard_forward(z, cfg.heads, cfg.d),
                "factorized": lambda: factorized_forward(
                    z, g, basis_lat, basis_lon, params, cfg.heads, cfg.d
                ),
            }
            for impl, fn in runs.items():
                profile = count_flops(
                    impl, n_lat, n_lon, cfg.d, cfg.heads,
                    cfg.n_basis_lat, cfg.n_basis_lon, dm, dtype.itemsize,
                )
                row = {
                    "impl": impl, "n_lat": n_lat, "n_lon": n_lon,
                    "d": cfg.d, "heads": cfg.heads,
                    "flops": profile.total_flops,
                    "latency_ms_median": "", "peak_bytes": "",
                    "threads": threads, "status": "ok",
                }
                try:
                    row["latency_ms_median"] = _time_median(fn, cfg.warmup, cfg.repeats)
                    row["peak_bytes"] = _peak_bytes(fn)
                except MemoryError:
                    row["status"] = "skipped"
                rows.append(row)
    finally:
        if limiter is not None:
            limiter.unregister()
    return rows

"""Attention scaling benchmark: wall time and instrumented buffer memory.

Times forward passes of the full and linearly-projected attention kernels
over a range of sequence lengths.  Memory is the instrumented peak size of
the per-head attention weight buffer (n x n for full, n x p for linear),
not process RSS.  Before timing, both variants are checked to agree at
p = n with identity projections.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .model import attention_meter, linear_attention, multi_head_attention
from .tensor import Tensor

VARIANTS = ("full", "linear")


@dataclass
class BenchRow:
    variant: str
    n: int
    p: int
    median_us: float
    iqr_us: float
    peak_buffer_bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    repetitions: int = 0
    threads: int = 1

    def medians(self, variant: str) -> dict[int, float]:
        return {r.n: r.median_us for r in self.rows if r.variant == variant}


def _make_params(rng, heads: int, d_model: int, d_k: int) -> dict:
    shapes = {"wq": (heads, d_model, d_k), "wk": (heads, d_model, d_k),
              "wv": (heads, d_model, d_k), "wo": (heads * d_k, d_model)}
    return {k: Tensor(rng.normal(0.0, 0.1, s)) for k, s in shapes.items()}


def _equivalence_gate(x: Tensor, params: dict, n: int) -> None:
    eye = Tensor(np.eye(n))
    full = multi_head_attention(x, x, x, params)
    lin = linear_attention(x, x, x, params, eye, eye)
    err = float(np.abs(full.data - lin.data).max())
    if err > 1e-6:
        raise AssertionError(f"attention variants disagree at p=n (max abs diff {err:.3g})")


def _time_call(fn, repetitions: int) -> tuple[float, float]:
    """Median and IQR in microseconds, auto-scaling the inner loop until one
    repetition is comfortably above the timer resolution."""
    resolution = time.get_clock_info("perf_counter").resolution
    inner = 1
    fn()  # warm-up, excluded
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed / inner > max(100.0 * resolution, 1e-5):
            break
        inner *= 2
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner * 1e6)
    med = statistics.median(times)
    q1, q3 = np.percentile(times, [25, 75])
    return med, float(q3 - q1)


def bench_attention(variants=VARIANTS, seq_lens=(128, 256, 512, 1024), p: int = 64,
                    heads: int = 1, d_k: int = 64, repetitions: int = 20,
                    seed: int = 0) -> BenchReport:
    """Forward-pass timing of attention kernels over sequence lengths.

    The default single 64-wide head keeps the O(n^2) pooling term dominant
    over the O(n) input projections across the measured range.
    """
    if repetitions < 10:
        raise ValueError("bench_attention: need at least 10 repetitions")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"bench_attention: unknown variant {v!r}")
    rng = np.random.default_rng(seed)
    d_model = heads * d_k
    report = BenchReport(repetitions=repetitions,
                         threads=int(os.environ.get("CATF_THREADS", "1")))
    with tz.no_grad():
        for n in seq_lens:
            params = _make_params(rng, heads, d_model, d_k)
            x = Tensor(rng.normal(0.0, 1.0, (n, d_model)))
            _equivalence_gate(x, params, n)
            f_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n), (n, p)))
            g_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n), (n, p)))
            calls = {
                "full": lambda: multi_head_attention(x, x, x, params),
                "linear": lambda: linear_attention(x, x, x, params, f_proj, g_proj),
            }
            for variant in variants:
                attention_meter.enabled = True
                attention_meter.reset()
                calls[variant]()
                peak = attention_meter.peak_bytes_per_head
                attention_meter.enabled = False
                med, iqr = _time_call(calls[variant], repetitions)
                report.rows.append(BenchRow(variant=variant, n=n,
                                            p=(p if variant == "linear" else n),
                                            median_us=med, iqr_us=iqr,
                                            peak_buffer_bytes=peak))
    return report


def fit_loglog_slope(report: BenchReport, variant: str) -> float:
    """Least-squares slope of log(median time) vs log(n)."""
    pts = sorted(report.medians(variant).items())
    if len(pts) < 2:
        raise ValueError(f"fit_loglog_slope: need >= 2 lengths for {variant!r}")
    xs = np.log([n for n, _ in pts])
    ys = np.log([t for _, t in pts])
    slope, _ = np.polyfit(xs, ys, 1)
    return float(slope)


def report_table(report: BenchReport) -> str:
    header = f"{'variant':<8}{'n':>6}{'p':>6}{'median_us':>12}{'iqr_us':>10}{'peak_buffer_bytes':>20}"
    lines = [header]
    for r in report.rows:
        lines.append(f"{r.variant:<8}{r.n:>6}{r.p:>6}{r.median_us:>12.1f}"
                     f"{r.iqr_us:>10.1f}{r.peak_buffer_bytes:>20}")
    return "\n".join(lines) + "\n"


def render_report(report: BenchReport, out_dir) -> dict[str, float]:
    """Write the table, a JSON record, and a log-log plot; returns fitted slopes."""
    if not report.rows:
        raise ValueError("render_report: empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bench.txt").write_text(report_table(report), encoding="utf-8")
    (out_dir / "bench.json").write_text(
        json.dumps([r.__dict__ for r in report.rows], indent=2) + "\n", encoding="utf-8")

    variants = sorted({r.variant for r in report.rows})
    slopes = {v: fit_loglog_slope(report, v) for v in variants}

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for v in variants:
        pts = sorted(report.medians(v).items())
        ax.loglog([n for n, _ in pts], [t for _, t in pts], "o-",
                  label=f"{v} (slope {slopes[v]:.2f})")
    ax.set_xlabel("sequence length n")
    ax.set_ylabel("median forward time (us)")
    ax.set_title("attention scaling")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "bench.png", dpi=120)
    plt.close(fig)
    return slopes

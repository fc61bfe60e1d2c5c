"""Matplotlib figures for simulation reports and sweeps, written straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .simulate import SimReport  # noqa: E402


def savefig(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_fifo_sweep(results: dict[int, list[float]], path: str | Path) -> Path:
    depths = sorted(results)
    med = [float(np.median(results[d])) for d in depths]
    lo = [float(np.min(results[d])) for d in depths]
    hi = [float(np.max(results[d])) for d in depths]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.fill_between(depths, lo, hi, alpha=0.25, label="min-max over seeds")
    ax.plot(depths, med, "o-", label="median")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("FIFO depth")
    ax.set_ylabel("PE utilization")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    return savefig(fig, path)


def plot_sparsity_sweep(points, path: str | Path) -> Path:
    pts = sorted(points, key=lambda p: p.density)
    d = [100 * p.density for p in pts]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(d, [p.balanced_speedup for p in pts], "o-", label="load-balanced")
    ax.plot(d, [p.unbalanced_speedup for p in pts], "s--", label="unbalanced")
    ax.set_xlabel("density (%)")
    ax.set_ylabel("speedup over dense")
    ax.grid(alpha=0.3)
    ax.legend()
    return savefig(fig, path)


def plot_timeline(report: SimReport, path: str | Path) -> Path:
    """Gantt-style view of the SpMV and element-wise lanes per phase."""
    fig, ax = plt.subplots(figsize=(8, 3))
    for p in report.phases:
        if p.spmv_cycles:
            ax.broken_barh([(p.start, p.spmv_cycles)], (2, 0.8), color="tab:blue")
            ax.text(p.start + p.spmv_cycles / 2, 2.4, p.spmv, ha="center", va="center", fontsize=6)
        if p.elem_cycles:
            ax.broken_barh([(p.start, p.elem_cycles)], (1, 0.8), color="tab:orange")
        if p.residual_fetch:
            ax.broken_barh([(p.start, p.residual_fetch)], (0, 0.8),
                           color="tab:red" if p.fetch_bound else "tab:gray")
    ax.set_yticks([0.4, 1.4, 2.4], ["fetch", "elem", "spmv"])
    ax.set_xlabel("cycle")
    ax.set_xlim(0, max(report.total_cycles, 1))
    return savefig(fig, path)


def plot_pe_busy(report: SimReport, path: str | Path) -> Path:
    busy = np.asarray(report.per_pe_busy)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(busy)), busy)
    if len(busy):
        ax.axhline(busy.mean(), color="k", lw=0.8, ls="--")
    ax.set_xlabel("PE")
    ax.set_ylabel("busy cycles")
    return savefig(fig, path)

"""Static PNG figures rendered next to the CSV outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_traces(traces: dict, path, metric: str = "mse", title: str | None = None) -> Path:
    """Log-scale ``metric`` against communications, one line per labelled trace."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, tr in traces.items():
        y = getattr(tr, metric)
        if len(tr) and (y > 0).any():
            ax.semilogy(tr.comm, y, label=label, lw=1.2)
    ax.set_xlabel("communications")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    if traces:
        ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_summary(rows: list[dict], path, value: str = "final_mse") -> Path:
    """``value`` against ``n`` per algorithm, log-log."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_alg: dict = {}
    for r in rows:
        if math.isfinite(r[value]):
            by_alg.setdefault(r["alg"], []).append((r["n"], r[value]))
    for alg, pts in sorted(by_alg.items()):
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=alg)
    ax.set_xlabel("n")
    ax.set_ylabel(value)
    if by_alg:
        ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path

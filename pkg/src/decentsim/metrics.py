"""Convergence traces, per-record metrics and transient-stage detection."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .errors import InvalidParameterError, OptimumUnavailable

CSV_HEADER = "comm,iter,mse,consensus,gap"
FIELDS = ("comm", "iter", "mse", "consensus", "gap")


@dataclass(frozen=True, eq=False)
class MetricsTrace:
    """Metrics recorded along one run, indexed by cumulative gossip communications."""

    comm: np.ndarray
    iter: np.ndarray
    mse: np.ndarray
    consensus: np.ndarray
    gap: np.ndarray
    manifest: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, manifest=None) -> "MetricsTrace":
        cols = {k: np.array([r[k] for r in records], dtype=float) for k in FIELDS}
        cols["comm"] = cols["comm"].astype(np.int64)
        cols["iter"] = cols["iter"].astype(np.int64)
        return cls(manifest=dict(manifest or {}), **cols)

    def __len__(self):
        return len(self.comm)

    @property
    def final_mse(self) -> float:
        return float(self.mse[-1])

    def records(self) -> list[dict]:
        return [{k: getattr(self, k)[i].item() for k in FIELDS} for i in range(len(self))]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for i in range(len(self)):
            buf.write(f"{self.comm[i]},{self.iter[i]},{self.mse[i]:.17g},"
                      f"{self.consensus[i]:.17g},{self.gap[i]:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, manifest=None) -> "MetricsTrace":
        text = source.read() if hasattr(source, "read") else Path(source).read_text()
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != CSV_HEADER:
            raise ValueError(f"trace CSV must start with header {CSV_HEADER!r}")
        rows = [line.split(",") for line in lines[1:]]
        records = [dict(zip(FIELDS, (int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]))))
                   for r in rows]
        return cls.from_records(records, manifest)

    def write(self, csv_path, manifest_path=None):
        self.to_csv(csv_path)
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(self.manifest, indent=2, sort_keys=True))


def compute_metrics(X, problem) -> dict:
    """``mse = (1/n) sum ||x_i - x*||^2``, ``consensus = (1/n)||X - 1 xbar^T||_F^2``
    and ``gap = f(xbar) - f*``."""
    try:
        x_star = problem.optimum()
        f_star = problem.f_star
    except Exception as exc:  # noqa: BLE001 - any solver failure means no optimum
        raise OptimumUnavailable(f"metrics need the optimum: {exc}") from exc
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    xbar = X.mean(axis=0)
    return {
        "mse": float(np.sum((X - x_star) ** 2) / n),
        "consensus": float(np.sum((X - xbar) ** 2) / n),
        "gap": problem.loss(xbar) - f_star,
    }


def averaging_weights(T: int, gamma: float, mu: float) -> np.ndarray:
    """``h_k = (1 - gamma*mu/2) h_{k+1}`` with ``h_T = 1``, for ``k = 0..T``."""
    if mu <= 0:
        raise InvalidParameterError(f"mu must be positive, got {mu}")
    q = 1.0 - gamma * mu / 2.0
    if not 0.0 < q <= 1.0:
        raise InvalidParameterError(f"need 0 < gamma*mu < 2, got {gamma * mu}")
    return q ** np.arange(T, -1, -1, dtype=float)


def weighted_gap(gaps, gamma: float, mu: float) -> float:
    """Weighted ergodic average ``sum h_k gap_k / sum h_k`` of a gap series or trace."""
    g = np.asarray(gaps.gap if isinstance(gaps, MetricsTrace) else gaps, dtype=float)
    h = averaging_weights(len(g) - 1, gamma, mu)
    return float(np.dot(h, g) / h.sum())


@dataclass(frozen=True)
class TransientEstimate:
    t_trans: float
    delta: float
    reached: bool

    @property
    def valid(self) -> bool:
        return self.reached


def _smooth(values, window):
    if window <= 1 or len(values) < 2:
        return np.asarray(values, dtype=float)
    return median_filter(np.asarray(values, dtype=float), size=window, mode="nearest")


def transient_stage(trace, reference, delta: float = 0.5, window: int = 5) -> TransientEstimate:
    """First communication count after which ``trace.mse`` stays within
    ``(1 + delta)`` of the reference (P-SGD) mse for the rest of the run.

    Both series are median-filtered over ``window`` records; the reference is
    interpolated log-linearly onto the trace's communication grid.
    """
    if delta < 0:
        raise InvalidParameterError(f"delta must be non-negative, got {delta}")
    comm = np.asarray(trace.comm, dtype=float)
    keep = comm <= reference.comm[-1]
    if keep.sum() < 2 or len(reference) < 2:
        return TransientEstimate(t_trans=float("inf"), delta=delta, reached=False)
    comm = comm[keep]
    alg = _smooth(trace.mse, window)[keep]
    tiny = np.finfo(float).tiny
    ref_log = np.log(np.maximum(_smooth(reference.mse, window), tiny))
    ref = np.exp(np.interp(comm, reference.comm.astype(float), ref_log))
    bad = np.flatnonzero(alg > (1.0 + delta) * ref)
    if bad.size == 0:
        return TransientEstimate(t_trans=float(comm[0]), delta=delta, reached=True)
    if bad[-1] == len(comm) - 1:
        return TransientEstimate(t_trans=float("inf"), delta=delta, reached=False)
    return TransientEstimate(t_trans=float(comm[bad[-1] + 1]), delta=delta, reached=True)

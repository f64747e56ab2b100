"""Mixing matrices for peer networks and the spectral quantities built on them.

Every constructor returns a :class:`MixingMatrix`, a symmetric doubly
stochastic weight matrix whose spectrum is computed lazily and cached.
Derived objects (lazy matrix, square root of ``I - Wbar``, accelerated
gossip polynomials and their damped version) are plain functions.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import (
    InvalidParameterError,
    InvalidTopologyError,
    InvariantViolation,
    NotPSDError,
)

SYM_TOL = 1e-12
ROW_TOL = 1e-10
NEG_TOL = 1e-12

__all__ = [
    "MixingMatrix",
    "Spectrum",
    "GossipPolynomial",
    "build_cycle",
    "build_complete",
    "build_grid",
    "build_convex_combination",
    "build_random",
    "metropolis_from_adjacency",
    "build_topology",
    "spectrum",
    "lazy",
    "sqrt_psd",
    "chebyshev_eta",
    "verbatim_eta",
    "acceleration_eta",
    "multi_gossip_rounds",
    "gossip_matrices",
    "fast_gossip_matrix",
    "damped_matrix",
]


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of a mixing matrix, sorted in descending order."""

    eigenvalues: np.ndarray
    beta: float

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.beta

    @property
    def inv_gap(self) -> float:
        gap = self.spectral_gap
        return math.inf if gap <= 0 else 1.0 / gap

    @property
    def lambda2(self) -> float:
        return float(self.eigenvalues[1]) if self.n > 1 else 0.0

    @property
    def lambdan(self) -> float:
        return float(self.eigenvalues[-1]) if self.n > 1 else 0.0

    @property
    def lazy_eigenvalues(self) -> np.ndarray:
        return (1.0 + self.eigenvalues) / 2.0

    @property
    def lazy_lambda2(self) -> float:
        return (1.0 + self.lambda2) / 2.0

    @property
    def lazy_lambdan(self) -> float:
        return (1.0 + self.lambdan) / 2.0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "beta": self.beta,
            "spectral_gap": self.spectral_gap,
            "inv_gap": self.inv_gap,
            "lambda2": self.lambda2,
            "lambdan": self.lambdan,
            "lazy_lambda2": self.lazy_lambda2,
            "lazy_lambdan": self.lazy_lambdan,
        }


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly stochastic weight matrix ``w`` over ``n`` nodes.

    Constructors in this module validate the invariants on creation. Matrices
    read from disk may skip validation so that a verification pass can report
    the defects instead of failing on load.
    """

    w: np.ndarray
    name: str = "custom"
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        w = np.array(self.w, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] == 0:
            raise InvalidTopologyError(f"mixing matrix must be square and non-empty, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @cached_property
    def spectrum(self) -> Spectrum:
        return spectrum(self)

    @property
    def beta(self) -> float:
        return self.spectrum.beta

    @property
    def connected(self) -> bool:
        return self.n == 1 or self.beta < 1.0 - 1e-9

    def violations(self) -> list[str]:
        """Return a human-readable list of violated invariants (empty if valid)."""
        w = self.w
        out = []
        asym = float(np.max(np.abs(w - w.T)))
        if asym > SYM_TOL:
            out.append(f"not symmetric: max |w_ij - w_ji| = {asym:.3e}")
        rows = np.abs(w.sum(axis=1) - 1.0)
        bad = np.flatnonzero(rows > ROW_TOL)
        if bad.size:
            out.append(f"rows {bad.tolist()} do not sum to 1 (max deviation {rows.max():.3e})")
        if w.min() < -NEG_TOL:
            out.append(f"negative entry {w.min():.3e}")
        return out

    def validate(self) -> "MixingMatrix":
        problems = self.violations()
        if problems:
            raise InvariantViolation("; ".join(problems))
        return self

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.w).tobytes()).hexdigest()[:16]

    # -- persistence -------------------------------------------------------

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.w, delimiter=",", fmt="%.17g")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, validate: bool = True, name: str = "csv") -> "MixingMatrix":
        """Read from a path or an open text stream."""
        text = source.read() if hasattr(source, "read") else Path(source).read_text()
        w = np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2)
        mat = cls(w, name=name)
        return mat.validate() if validate else mat

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "entries": self.w.tolist(), "beta": self.beta})

    @classmethod
    def from_json(cls, text: str, validate: bool = True) -> "MixingMatrix":
        data = json.loads(text)
        w = np.asarray(data["entries"], dtype=float)
        if w.shape != (data["n"], data["n"]):
            raise InvalidTopologyError(f"entries shape {w.shape} does not match n={data['n']}")
        mat = cls(w, name="json")
        return mat.validate() if validate else mat


@dataclass(frozen=True, eq=False)
class GossipPolynomial:
    """Accelerated gossip matrix after ``R`` rounds and its damped version."""

    R: int
    eta: float
    tau: float
    m: np.ndarray
    mbar: np.ndarray

    def rho(self) -> float:
        """Spectral radius of ``M^(R) - 11^T/n``."""
        n = self.m.shape[0]
        return float(np.max(np.abs(np.linalg.eigvalsh(self.m - np.full((n, n), 1.0 / n)))))


# -- constructors -------------------------------------------------------------


def build_cycle(n: int) -> MixingMatrix:
    """Ring of ``n`` nodes; self weight and both neighbour weights are 1/3."""
    if n < 3:
        raise InvalidTopologyError(f"cycle needs n >= 3, got {n}")
    adj = np.eye(n, k=1) + np.eye(n, k=-1)
    adj[0, -1] = adj[-1, 0] = 1.0
    return MixingMatrix((np.eye(n) + adj) / 3.0, name=f"cycle{n}").validate()


def build_complete(n: int) -> MixingMatrix:
    if n < 1:
        raise InvalidTopologyError(f"complete graph needs n >= 1, got {n}")
    return MixingMatrix(np.full((n, n), 1.0 / n), name=f"complete{n}")


def build_grid(rows: int, cols: int) -> MixingMatrix:
    """2-D lattice with Metropolis-Hastings weights."""
    if rows < 1 or cols < 1:
        raise InvalidTopologyError(f"grid dimensions must be positive, got {rows}x{cols}")
    if rows * cols == 1:
        return MixingMatrix(np.ones((1, 1)), name="grid1x1")
    g = nx.grid_2d_graph(rows, cols)
    nodes = sorted(g.nodes())
    adj = nx.to_numpy_array(g, nodelist=nodes, dtype=bool)
    mat = metropolis_from_adjacency(adj)
    return MixingMatrix(mat.w, name=f"grid{rows}x{cols}")


def build_convex_combination(n: int, beta: float) -> MixingMatrix:
    """``beta*I + (1-beta)*11^T/n``; every non-unit eigenvalue equals ``beta``."""
    if not 0.0 <= beta < 1.0:
        raise InvalidParameterError(f"beta must lie in [0, 1), got {beta}")
    if n < 1:
        raise InvalidTopologyError(f"n must be positive, got {n}")
    w = beta * np.eye(n) + (1.0 - beta) * np.full((n, n), 1.0 / n)
    return MixingMatrix(w, name=f"convex{n}_{beta:g}")


def metropolis_from_adjacency(adj) -> MixingMatrix:
    """Metropolis-Hastings weights ``1/(1 + max(deg_i, deg_j))`` on each edge.

    A disconnected graph still yields a valid doubly stochastic matrix, but
    ``beta`` is 1 and the result carries a ``"disconnected"`` warning.
    """
    a = np.asarray(adj).astype(bool)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidTopologyError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise InvalidTopologyError("adjacency must be symmetric")
    if np.any(np.diag(a)):
        raise InvalidTopologyError("adjacency must have a zero diagonal")
    n = a.shape[0]
    deg = a.sum(axis=1)
    pair = 1.0 / (1.0 + np.maximum.outer(deg, deg))
    w = np.where(a, pair, 0.0)
    w[np.diag_indices(n)] = 1.0 - w.sum(axis=1)
    ncomp, _ = connected_components(a, directed=False)
    warnings = ("disconnected",) if ncomp > 1 else ()
    return MixingMatrix(w, name="metropolis", warnings=warnings).validate()


def build_random(n: int, p: float = 0.3, seed: int = 0, max_tries: int = 1000) -> MixingMatrix:
    """Connected Erdos-Renyi graph with Metropolis weights (resampled until connected)."""
    if n < 2:
        raise InvalidTopologyError(f"random graph needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        g = nx.gnp_random_graph(n, p, seed=int(rng.integers(2**31)))
        if nx.is_connected(g):
            adj = nx.to_numpy_array(g, nodelist=range(n), dtype=bool)
            return MixingMatrix(metropolis_from_adjacency(adj).w, name=f"random{n}_{seed}")
    raise InvalidTopologyError(f"no connected G({n}, {p}) sample after {max_tries} tries")


def build_topology(kind: str, n: int | None = None, *, rows=None, cols=None, beta=None,
                   p: float = 0.3, seed: int = 0) -> MixingMatrix:
    """Dispatch on a topology name as used by the CLI and sweep specs."""
    kind = kind.lower()
    if kind in ("cycle", "ring"):
        return build_cycle(n)
    if kind in ("complete", "full"):
        return build_complete(n)
    if kind == "grid":
        if rows is None or cols is None:
            if n is None:
                raise InvalidTopologyError("grid needs rows and cols (or a square n)")
            side = math.isqrt(n)
            if side * side != n:
                raise InvalidTopologyError(f"grid with only n given needs a perfect square, got {n}")
            rows = cols = side
        return build_grid(rows, cols)
    if kind in ("convex", "convex_combination"):
        if beta is None:
            raise InvalidParameterError("convex topology needs beta")
        return build_convex_combination(n, beta)
    if kind in ("random", "erdos_renyi"):
        return build_random(n, p=p, seed=seed)
    raise InvalidTopologyError(f"unknown topology {kind!r}")


# -- spectral tools -----------------------------------------------------------


def _matrix(w) -> np.ndarray:
    return w.w if isinstance(w, MixingMatrix) else np.asarray(w, dtype=float)


def spectrum(w) -> Spectrum:
    a = _matrix(w)
    asym = float(np.max(np.abs(a - a.T)))
    if asym > SYM_TOL:
        raise InvariantViolation(f"spectrum needs a symmetric matrix (asymmetry {asym:.3e})")
    ev = np.linalg.eigvalsh(a)[::-1].copy()
    beta = float(max(abs(ev[1]), abs(ev[-1]))) if len(ev) > 1 else 0.0
    ev.setflags(write=False)
    return Spectrum(eigenvalues=ev, beta=beta)


def lazy(w) -> MixingMatrix:
    """``(I + W) / 2``."""
    a = _matrix(w)
    name = getattr(w, "name", "custom")
    return MixingMatrix((np.eye(a.shape[0]) + a) / 2.0, name=f"lazy({name})")


def sqrt_psd(a, clamp: float = 1e-6) -> np.ndarray:
    """Symmetric square root ``U diag(sqrt(lambda)) U^T``.

    Eigenvalues down to ``-clamp`` are treated as round-off and zeroed, as are
    positive eigenvalues at round-off level, so null spaces are preserved exactly.
    """
    a = np.asarray(a, dtype=float)
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10:
        raise NotPSDError("sqrt_psd needs a symmetric matrix")
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    if vals.min() < -clamp:
        raise NotPSDError(f"matrix has eigenvalue {vals.min():.3e} < -{clamp:g}")
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.abs(vals).max(initial=0.0)))
    root = np.sqrt(np.where(vals > floor, vals, 0.0))
    s = (vecs * root) @ vecs.T
    return (s + s.T) / 2.0


def chebyshev_eta(beta: float) -> float:
    """Two-term acceleration weight ``(1 - sqrt(1-b^2)) / (1 + sqrt(1-b^2))``."""
    s = math.sqrt(max(0.0, 1.0 - beta * beta))
    return (1.0 - s) / (1.0 + s)


def verbatim_eta(beta: float) -> float:
    """The alternative weight ``(1 - sqrt(1-b^2)) / (1 + sqrt(1+b^2))``."""
    return (1.0 - math.sqrt(max(0.0, 1.0 - beta * beta))) / (1.0 + math.sqrt(1.0 + beta * beta))


def acceleration_eta(beta: float, rule: str = "chebyshev") -> float:
    if rule == "chebyshev":
        return chebyshev_eta(beta)
    if rule == "verbatim":
        return verbatim_eta(beta)
    raise InvalidParameterError(f"unknown eta rule {rule!r}")


def multi_gossip_rounds(n: int, beta: float) -> int:
    """Default round count ``ceil((ln n + 4) / sqrt(1 - beta))``."""
    if not 0.0 <= beta < 1.0:
        raise InvalidParameterError(f"beta must lie in [0, 1), got {beta}")
    return int(math.ceil((math.log(n) + 4.0) / math.sqrt(1.0 - beta)))


def gossip_matrices(w, R: int, eta: float) -> list[np.ndarray]:
    """``[M^(0), ..., M^(R)]`` from the three-term recursion with ``M^(-1) = M^(0) = I``."""
    a = _matrix(w)
    n = a.shape[0]
    prev = cur = np.eye(n)
    out = [cur]
    for _ in range(R):
        prev, cur = cur, (1.0 + eta) * (a @ cur) - eta * prev
        out.append(cur)
    return out


def damped_matrix(m, tau: float) -> np.ndarray:
    """``(1 - tau) M + tau I``."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidParameterError(f"tau must lie in [0, 1], got {tau}")
    m = np.asarray(m, dtype=float)
    return (1.0 - tau) * m + tau * np.eye(m.shape[0])


def fast_gossip_matrix(w, R: int, eta: float | None = None, tau: float | None = None,
                       eta_rule: str = "chebyshev") -> GossipPolynomial:
    """Matrix form of ``R`` accelerated gossip rounds followed by damping.

    ``eta`` defaults to the acceleration weight for the matrix's ``beta``
    and ``tau`` to ``1/(2n)``.
    """
    if R < 1:
        raise InvalidParameterError(f"R must be >= 1, got {R}")
    a = _matrix(w)
    n = a.shape[0]
    if eta is None:
        beta = w.beta if isinstance(w, MixingMatrix) else spectrum(a).beta
        eta = acceleration_eta(beta, eta_rule)
    if not 0.0 <= eta < 1.0:
        raise InvalidParameterError(f"eta must lie in [0, 1), got {eta}")
    if tau is None:
        tau = 1.0 / (2.0 * n)
    m = gossip_matrices(a, R, eta)[-1]
    return GossipPolynomial(R=R, eta=eta, tau=tau, m=m, mbar=damped_matrix(m, tau))

"""Per-node objectives with exact and single-sample gradient oracles.

Two families are provided: least squares ``f_i(x) = 1/2 ||A_i x - b_i||^2``
and (optionally ridge-regularised) logistic regression
``f_i(x) = mean_m log(1 + exp(-y h^T x)) + rho/2 ||x||^2``. The global
objective is always the node average ``f(x) = (1/n) sum_i f_i(x)``.

Iterates are stacked row-wise: ``X[i]`` is node ``i``'s copy of ``x``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    ConvergenceError,
    DimensionError,
    InvalidParameterError,
    OptimumUnavailable,
    ParseError,
    SingularityError,
)

__all__ = [
    "Problem",
    "LeastSquaresProblem",
    "LogisticProblem",
    "Dataset",
    "HeterogeneityReport",
    "gen_least_squares",
    "gen_logistic",
    "exact_solution_ls",
    "load_libsvm",
    "heterogeneous_split",
    "heterogeneity_b2",
    "numeric_optimum",
    "save_problem",
    "load_problem",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Problem:
    """Common oracle surface. Subclasses define the local losses and gradients."""

    kind = "abstract"
    n: int
    d: int
    M: int

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape != (self.n, self.d):
            raise DimensionError(f"expected node states of shape {(self.n, self.d)}, got {X.shape}")
        return X

    # subclasses implement these
    def local_values(self, X) -> np.ndarray:
        raise NotImplementedError

    def full_gradient(self, X) -> np.ndarray:
        raise NotImplementedError

    def sampled_gradient(self, X, idx) -> np.ndarray:
        raise NotImplementedError

    def sample_variance(self, X) -> np.ndarray:
        raise NotImplementedError

    @property
    def L(self) -> float:
        raise NotImplementedError

    @property
    def mu(self) -> float:
        raise NotImplementedError

    def _arrays(self) -> tuple:
        raise NotImplementedError

    # shared machinery

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One data index per node, drawn uniformly and independently."""
        if self.M == 0:
            return np.zeros(self.n, dtype=np.int64)
        return rng.integers(0, self.M, size=self.n)

    def stochastic_gradient(self, X, rng: np.random.Generator) -> np.ndarray:
        """Unbiased single-sample gradient at every node's iterate."""
        return self.sampled_gradient(X, self.sample(rng))

    def gradient(self, x) -> np.ndarray:
        """Gradient of the global average objective at a single point."""
        x = np.asarray(x, dtype=float)
        return self.full_gradient(np.tile(x, (self.n, 1))).mean(axis=0)

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.local_values(np.tile(x, (self.n, 1))).mean())

    def optimum(self) -> np.ndarray:
        return self._optimum

    @cached_property
    def _optimum(self) -> np.ndarray:
        x, _ = numeric_optimum(self, tol=1e-10)
        return _frozen(x)

    @cached_property
    def f_star(self) -> float:
        return self.loss(self.optimum())

    @cached_property
    def sigma2(self) -> float:
        """Declared noise bound: largest per-node sample variance at the optimum."""
        xs = np.tile(self.optimum(), (self.n, 1))
        return float(self.sample_variance(xs).max())

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for a in self._arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


class LeastSquaresProblem(Problem):
    """``f_i(x) = 1/2 ||A_i x - b_i||^2`` with ``A`` of shape ``(n, M, d)``.

    The single-sample loss is ``(M/2)(a^T x - b)^2`` so that its gradient
    averages to the full local gradient.
    """

    kind = "least_squares"

    def __init__(self, A, b, local_solutions=None, meta=None):
        self.A = _frozen(A)
        self.b = _frozen(b)
        if self.A.ndim != 3 or self.b.shape != self.A.shape[:2]:
            raise DimensionError(f"A must be (n, M, d) and b (n, M); got {self.A.shape}, {self.b.shape}")
        self.n, self.M, self.d = self.A.shape
        self.local_solutions = None if local_solutions is None else _frozen(local_solutions)
        self.meta = dict(meta or {})
        self._rows = np.arange(self.n)

    def _arrays(self):
        return (self.A, self.b)

    @cached_property
    def gram(self) -> np.ndarray:
        return np.einsum("nmi,nmj->nij", self.A, self.A)

    @cached_property
    def _gram_eigs(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.gram)

    @property
    def L(self) -> float:
        return float(self._gram_eigs[:, -1].max())

    @property
    def mu(self) -> float:
        return float(max(self._gram_eigs[:, 0].min(), 0.0))

    def residuals(self, X) -> np.ndarray:
        return np.einsum("nmd,nd->nm", self.A, X) - self.b

    def local_values(self, X):
        X = self._check(X)
        return 0.5 * np.sum(self.residuals(X) ** 2, axis=1)

    def full_gradient(self, X):
        X = self._check(X)
        return np.einsum("nmd,nm->nd", self.A, self.residuals(X))

    def sampled_gradient(self, X, idx):
        X = self._check(X)
        a = self.A[self._rows, idx]
        r = np.einsum("nd,nd->n", a, X) - self.b[self._rows, idx]
        return (self.M * r)[:, None] * a

    def sample_variance(self, X):
        X = self._check(X)
        per = self.M * self.residuals(X)[:, :, None] * self.A
        second = np.mean(np.sum(per**2, axis=2), axis=1)
        return second - np.sum(self.full_gradient(X) ** 2, axis=1)

    @cached_property
    def _optimum(self):
        return _frozen(exact_solution_ls(self))


class LogisticProblem(Problem):
    """Logistic loss averaged over each node's ``M`` samples, plus ``rho/2 ||x||^2``."""

    kind = "logistic"

    def __init__(self, H, y, rho: float = 0.0, local_solutions=None, meta=None):
        self.H = _frozen(H)
        self.y = _frozen(y)
        if self.H.ndim != 3 or self.y.shape != self.H.shape[:2]:
            raise DimensionError(f"H must be (n, M, d) and y (n, M); got {self.H.shape}, {self.y.shape}")
        if rho < 0:
            raise InvalidParameterError(f"rho must be >= 0, got {rho}")
        self.n, self.M, self.d = self.H.shape
        self.rho = float(rho)
        self.local_solutions = None if local_solutions is None else _frozen(local_solutions)
        self.meta = dict(meta or {})
        self._rows = np.arange(self.n)

    def _arrays(self):
        return (self.H, self.y, np.array([self.rho]))

    @property
    def L(self) -> float:
        if self.M == 0:
            return self.rho
        top = np.linalg.eigvalsh(np.einsum("nmi,nmj->nij", self.H, self.H))[:, -1].max()
        return float(top / (4.0 * self.M) + self.rho)

    @property
    def mu(self) -> float:
        return self.rho

    def _margins(self, X):
        return self.y * np.einsum("nmd,nd->nm", self.H, X)

    def local_values(self, X):
        X = self._check(X)
        ridge = 0.5 * self.rho * np.sum(X**2, axis=1)
        if self.M == 0:
            return ridge
        return np.mean(np.logaddexp(0.0, -self._margins(X)), axis=1) + ridge

    def full_gradient(self, X):
        X = self._check(X)
        if self.M == 0:
            return self.rho * X
        weight = -self.y * expit(-self._margins(X)) / self.M
        return np.einsum("nmd,nm->nd", self.H, weight) + self.rho * X

    def sampled_gradient(self, X, idx):
        X = self._check(X)
        if self.M == 0:
            return self.rho * X
        h = self.H[self._rows, idx]
        yy = self.y[self._rows, idx]
        z = yy * np.einsum("nd,nd->n", h, X)
        return (-yy * expit(-z))[:, None] * h + self.rho * X

    def sample_variance(self, X):
        X = self._check(X)
        if self.M == 0:
            return np.zeros(self.n)
        per = (-self.y * expit(-self._margins(X)))[:, :, None] * self.H
        mean = per.mean(axis=1)
        return np.mean(np.sum(per**2, axis=2), axis=1) - np.sum(mean**2, axis=1)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class HeterogeneityReport:
    b2: float
    node_norms: np.ndarray


# -- generators ---------------------------------------------------------------


def gen_least_squares(n: int, d: int = 10, M: int = 1000, sigma_h: float = 0.0,
                      sigma_s: float = 0.0, seed: int = 0) -> LeastSquaresProblem:
    """Synthetic least squares with local solutions ``x* + v_i``, ``v_i ~ N(0, sigma_h^2 I)``.

    ``sigma_h`` and ``sigma_s`` are standard deviations.
    """
    if min(n, d, M) < 1:
        raise InvalidParameterError(f"n, d, M must be >= 1, got {n}, {d}, {M}")
    if sigma_h < 0 or sigma_s < 0:
        raise InvalidParameterError("sigma_h and sigma_s must be non-negative")
    rng = np.random.default_rng(seed)
    x_star = rng.standard_normal(d)
    local = x_star + sigma_h * rng.standard_normal((n, d))
    A = rng.standard_normal((n, M, d))
    noise = sigma_s * rng.standard_normal((n, M))
    b = np.einsum("nmd,nd->nm", A, local) + noise
    meta = {"generator": "least_squares", "n": n, "d": d, "M": M,
            "sigma_h": sigma_h, "sigma_s": sigma_s, "seed": seed}
    return LeastSquaresProblem(A, b, local_solutions=local, meta=meta)


def gen_logistic(n: int, d: int = 10, M: int = 1000, sigma_h: float = 0.0, seed: int = 0,
                 rho: float = 0.0) -> LogisticProblem:
    """Synthetic logistic regression; ``y = +1`` with probability ``sigmoid(h^T x*_i)``."""
    if min(n, d, M) < 1:
        raise InvalidParameterError(f"n, d, M must be >= 1, got {n}, {d}, {M}")
    if sigma_h < 0:
        raise InvalidParameterError("sigma_h must be non-negative")
    rng = np.random.default_rng(seed)
    x_star = rng.standard_normal(d)
    local = x_star + sigma_h * rng.standard_normal((n, d))
    H = rng.standard_normal((n, M, d))
    prob = expit(np.einsum("nmd,nd->nm", H, local))
    y = np.where(rng.random((n, M)) < prob, 1.0, -1.0)
    meta = {"generator": "logistic", "n": n, "d": d, "M": M, "sigma_h": sigma_h,
            "seed": seed, "rho": rho}
    return LogisticProblem(H, y, rho=rho, local_solutions=local, meta=meta)


def exact_solution_ls(problem: LeastSquaresProblem) -> np.ndarray:
    """Normal-equation solution ``(sum A_i^T A_i)^{-1} sum A_i^T b_i``."""
    G = problem.gram.sum(axis=0)
    rhs = np.einsum("nmd,nm->d", problem.A, problem.b)
    if np.linalg.matrix_rank(G) < problem.d:
        raise SingularityError("sum of A_i^T A_i is singular")
    x = np.linalg.solve(G, rhs)
    # one step of iterative refinement
    x += np.linalg.solve(G, rhs - G @ x)
    return x


# -- real data ----------------------------------------------------------------

_DEFAULT_LABELS = {1.0: 1.0, -1.0: -1.0, 0.0: -1.0}


def load_libsvm(path, n_features: int | None = None, label_map: dict | None = None,
                drop_unmapped: bool = False) -> Dataset:
    """Parse ``label idx:val idx:val ...`` lines (1-based indices) into a dense dataset.

    ``label_map`` maps raw labels to +1/-1; the default accepts +1, -1 and 0.
    Samples whose label is not in the map raise :class:`ParseError` unless
    ``drop_unmapped`` is set (e.g. keeping only digits 2 and 4 of MNIST).
    """
    mapping = {float(k): float(v) for k, v in (label_map or _DEFAULT_LABELS).items()}
    labels, rows, max_idx = [], [], 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
            if label not in mapping:
                if drop_unmapped:
                    continue
                raise ParseError(f"label {tokens[0]} has no binary mapping", lineno)
            entries = {}
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j, v = int(idx), float(val)
                except ValueError:
                    raise ParseError(f"bad feature token {tok!r}", lineno) from None
                if not sep or j < 1:
                    raise ParseError(f"bad feature token {tok!r}", lineno)
                if n_features is not None and j > n_features:
                    raise ParseError(f"feature index {j} exceeds n_features={n_features}", lineno)
                entries[j - 1] = v
                max_idx = max(max_idx, j)
            labels.append(mapping[label])
            rows.append(entries)
    d = n_features if n_features is not None else max_idx
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for j, v in entries.items():
            X[r, j] = v
    return Dataset(features=X, labels=np.asarray(labels, dtype=float))


def heterogeneous_split(dataset: Dataset, n: int, pos_ratio: float, seed: int = 0,
                        rho: float = 0.0, shard_size: int | None = None) -> LogisticProblem:
    """Label-skewed shards: the first ``n//2`` nodes hold a ``pos_ratio`` share of
    positives, the remaining nodes the same share of negatives.

    Every node gets ``shard_size`` samples. When it is not given the largest
    size that both classes can supply (at most ``len(dataset) // n``) is used.
    """
    if not 0.0 < pos_ratio < 1.0:
        raise InvalidParameterError(f"pos_ratio must lie in (0, 1), got {pos_ratio}")
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    pos = np.flatnonzero(dataset.labels > 0)
    neg = np.flatnonzero(dataset.labels < 0)
    first = n // 2
    second = n - first

    def need(m):
        major = int(round(pos_ratio * m))
        return first * major + second * (m - major), first * (m - major) + second * major, major

    if shard_size is None:
        m = len(dataset) // n
        while m > 0 and (need(m)[0] > len(pos) or need(m)[1] > len(neg)):
            m -= 1
        if m == 0:
            short = "positive" if len(pos) < len(neg) else "negative"
            raise InvalidParameterError(f"not enough {short} samples for {n} shards")
    else:
        m = shard_size
    need_pos, need_neg, major = need(m)
    if need_pos > len(pos):
        raise InvalidParameterError(f"positive class has {len(pos)} samples, split needs {need_pos}")
    if need_neg > len(neg):
        raise InvalidParameterError(f"negative class has {len(neg)} samples, split needs {need_neg}")
    rng = np.random.default_rng(seed)
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    shards, pp, nn = [], 0, 0
    for i in range(n):
        k_pos = major if i < first else m - major
        take = np.concatenate([pos[pp:pp + k_pos], neg[nn:nn + m - k_pos]])
        pp += k_pos
        nn += m - k_pos
        shards.append(rng.permutation(take))
    idx = np.stack(shards)
    meta = {"generator": "heterogeneous_split", "n": n, "M": m, "pos_ratio": pos_ratio,
            "seed": seed, "rho": rho}
    return LogisticProblem(dataset.features[idx], dataset.labels[idx], rho=rho, meta=meta)


# -- derived quantities -------------------------------------------------------


def heterogeneity_b2(problem: Problem, x_star=None) -> HeterogeneityReport:
    """``b^2 = (1/n) sum_i ||grad f_i(x*)||^2``."""
    if x_star is None:
        try:
            x_star = problem.optimum()
        except (ConvergenceError, SingularityError) as exc:
            raise OptimumUnavailable(f"optimum unavailable ({exc}); pass x_star from numeric_optimum") from exc
    g = problem.full_gradient(np.tile(np.asarray(x_star, dtype=float), (problem.n, 1)))
    norms = np.linalg.norm(g, axis=1)
    return HeterogeneityReport(b2=float(np.mean(norms**2)), node_norms=norms)


def numeric_optimum(problem: Problem, tol: float = 1e-10, max_iter: int = 10**6,
                    x0=None, method: str = "gd") -> tuple[np.ndarray, float]:
    """Minimise the global average by full-gradient descent with step ``1/L``.

    ``method="nesterov"`` switches to accelerated descent with gradient
    restarts. Returns ``(x, f(x))`` once ``||grad f(x)|| <= tol``.
    """
    if tol <= 0:
        raise InvalidParameterError(f"tol must be positive, got {tol}")
    L = problem.L
    if L <= 0:
        return np.zeros(problem.d), problem.loss(np.zeros(problem.d))
    step = 1.0 / L
    x = np.zeros(problem.d) if x0 is None else np.array(x0, dtype=float)
    y, t = x.copy(), 1.0
    for _ in range(max_iter):
        g = problem.gradient(x if method == "gd" else y)
        if method == "gd":
            if np.linalg.norm(g) <= tol:
                return x, problem.loss(x)
            x = x - step * g
            continue
        x_new = y - step * g
        if np.linalg.norm(problem.gradient(x_new)) <= tol:
            return x_new, problem.loss(x_new)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if np.dot(g, x_new - x) > 0:
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    gn = float(np.linalg.norm(problem.gradient(x)))
    raise ConvergenceError(f"no convergence after {max_iter} iterations (|grad| = {gn:.3e})",
                           best=x, grad_norm=gn)


# -- persistence --------------------------------------------------------------


def save_problem(problem: Problem, directory) -> Path:
    """Write ``meta.json`` plus one CSV per array (node blocks stacked row-wise)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, M, d = problem.n, problem.M, problem.d
    meta = {"kind": problem.kind, "n": n, "M": M, "d": d, "digest": problem.digest(),
            "params": problem.meta}
    if isinstance(problem, LeastSquaresProblem):
        np.savetxt(out / "A.csv", problem.A.reshape(n * M, d), delimiter=",", fmt="%.17g")
        np.savetxt(out / "b.csv", problem.b.reshape(n * M), delimiter=",", fmt="%.17g")
    else:
        meta["rho"] = problem.rho
        np.savetxt(out / "H.csv", problem.H.reshape(n * M, d), delimiter=",", fmt="%.17g")
        np.savetxt(out / "y.csv", problem.y.reshape(n * M), delimiter=",", fmt="%.17g")
    if problem.local_solutions is not None:
        np.savetxt(out / "local_solutions.csv", problem.local_solutions, delimiter=",", fmt="%.17g")
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def load_problem(directory) -> Problem:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    n, M, d = meta["n"], meta["M"], meta["d"]
    local = None
    if (src / "local_solutions.csv").exists():
        local = np.loadtxt(src / "local_solutions.csv", delimiter=",", ndmin=2)
    if meta["kind"] == "least_squares":
        A = np.loadtxt(src / "A.csv", delimiter=",", ndmin=2).reshape(n, M, d)
        b = np.loadtxt(src / "b.csv", delimiter=",", ndmin=1).reshape(n, M)
        return LeastSquaresProblem(A, b, local_solutions=local, meta=meta.get("params"))
    H = np.loadtxt(src / "H.csv", delimiter=",", ndmin=2).reshape(n, M, d)
    y = np.loadtxt(src / "y.csv", delimiter=",", ndmin=1).reshape(n, M)
    return LogisticProblem(H, y, rho=meta["rho"], local_solutions=local, meta=meta.get("params"))

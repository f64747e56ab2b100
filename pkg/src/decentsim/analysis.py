"""Numerical checks of the structural results behind D^2/Exact-Diffusion.

Each check returns a :class:`Report` that serialises to
``{check, passed, lhs, rhs, tolerance, offenders, details}``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import topology as topo
from .algorithms import NodeStates, check_sqrt_pair, d2ed_pd_step
from .errors import ConvergenceError, DimensionError, VerificationFailure


@dataclass
class Report:
    check: str
    passed: bool
    lhs: float | None = None
    rhs: float | None = None
    tolerance: float | None = None
    offenders: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("lhs", "rhs"):
            if out[k] is not None and not math.isfinite(out[k]):
                out[k] = str(out[k])
        return out

    def require(self) -> "Report":
        if not self.passed:
            raise VerificationFailure(f"{self.check} failed: {self.offenders[:5]}", report=self)
        return self


def _mat(w):
    return w.w if isinstance(w, topo.MixingMatrix) else np.asarray(w, dtype=float)


# -- augmented matrix ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AugmentedMatrix:
    """``B = [[Wbar, -V], [V Wbar, Wbar]]`` driving the error recursion."""

    B: np.ndarray

    @property
    def n(self) -> int:
        return self.B.shape[0] // 2


def build_augmented(Wbar, V) -> AugmentedMatrix:
    wbar, v = _mat(Wbar), np.asarray(V, dtype=float)
    if wbar.shape != v.shape or wbar.ndim != 2 or wbar.shape[0] != wbar.shape[1]:
        raise DimensionError(f"Wbar {wbar.shape} and V {v.shape} must be equal square matrices")
    check_sqrt_pair(wbar, v)
    B = np.block([[wbar, -v], [v @ wbar, wbar]])
    return AugmentedMatrix(B)


def augmented_from_topology(W) -> AugmentedMatrix:
    wbar = topo.lazy(W).w
    return build_augmented(wbar, topo.sqrt_psd(np.eye(wbar.shape[0]) - wbar))


@dataclass(frozen=True)
class DecompositionCheck:
    unit_count: int
    magnitudes: np.ndarray
    expected: np.ndarray
    nonunit_radius: float
    bound: float
    report: Report


def verify_decomposition(aug: AugmentedMatrix, W, tol: float = 1e-8) -> DecompositionCheck:
    """Compare ``|eig(B)|`` with ``{1, 1} U {sqrt(lazy lambda_i) x 2 : i >= 2}``."""
    spec = W.spectrum if isinstance(W, topo.MixingMatrix) else topo.spectrum(W)
    eig = np.linalg.eigvals(aug.B)
    mags = np.sort(np.abs(eig))[::-1]
    lazy_rest = spec.lazy_eigenvalues[1:]
    expected = np.sort(np.concatenate([[1.0, 1.0], np.repeat(np.sqrt(lazy_rest), 2)]))[::-1]
    diff = np.abs(mags - expected)
    offenders = [{"index": int(i), "got": float(mags[i]), "expected": float(expected[i])}
                 for i in np.flatnonzero(diff > tol)]
    unit_count = int(np.sum(np.abs(eig - 1.0) <= 1e-6))
    # drop the two eigenvalues nearest 1 to get the non-unit part
    order = np.argsort(np.abs(eig - 1.0))
    rest = np.abs(eig[order[2:]])
    radius = float(rest.max()) if rest.size else 0.0
    target = math.sqrt(spec.lazy_lambda2) if spec.n > 1 else 0.0
    radius_ok = abs(radius - target) <= tol
    if not radius_ok:
        offenders.append({"nonunit_radius": radius, "expected": target})
    passed = not offenders and unit_count == 2 and bool(np.all(rest < 1.0))
    report = Report("decomposition", passed, lhs=radius, rhs=target, tolerance=tol, offenders=offenders,
                    details={"n": spec.n, "unit_count": unit_count, "max_abs_diff": float(diff.max()),
                             "inverse_sqrt_lazy_lambdan": 1.0 / math.sqrt(spec.lazy_lambdan)})
    return DecompositionCheck(unit_count=unit_count, magnitudes=mags, expected=expected,
                              nonunit_radius=radius, bound=target, report=report)


# -- optimality conditions ----------------------------------------------------


def pinv_sym(V, cutoff: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh(np.asarray(V, dtype=float))
    inv = np.where(np.abs(vals) > cutoff, 1.0 / np.where(np.abs(vals) > cutoff, vals, 1.0), 0.0)
    return (vecs * inv) @ vecs.T


def dual_optimum(problem, Wbar, V, gamma, x_star=None) -> np.ndarray:
    """``y* = -gamma V^+ Wbar grad f(1 x*^T)`` (lies in the range of ``V``)."""
    if x_star is None:
        x_star = problem.optimum()
    X = np.tile(np.asarray(x_star, dtype=float), (problem.n, 1))
    return -gamma * pinv_sym(V) @ _mat(Wbar) @ problem.full_gradient(X)


def optimality_residual(x, y, problem, Wbar, V, gamma) -> tuple[float, float]:
    """``(||gamma Wbar grad f(x) + V y||_F, ||V x||_F)``."""
    x = np.asarray(x, dtype=float)
    V = np.asarray(V, dtype=float)
    r1 = np.linalg.norm(gamma * _mat(Wbar) @ problem.full_gradient(x) + V @ np.asarray(y, dtype=float))
    r2 = np.linalg.norm(V @ x)
    return float(r1), float(r2)


def solve_pd_fixed_point(problem, W, gamma, max_iter: int = 200_000, tol: float = 1e-13):
    """Run the noiseless primal-dual recursion until the iterates stop moving.

    Returns ``(states, wbar, V)``.
    """
    n = problem.n
    wbar = topo.lazy(W).w
    V = topo.sqrt_psd(np.eye(n) - wbar)
    states = NodeStates(x=np.zeros((n, problem.d)), y=np.zeros((n, problem.d)))
    for _ in range(max_iter):
        new = d2ed_pd_step(states, wbar, V, problem, gamma, stochastic=False, check=False)
        move = np.linalg.norm(new.x - states.x) + np.linalg.norm(new.y - states.y)
        states = new
        if move <= tol * (1.0 + np.linalg.norm(states.x)):
            return states, wbar, V
    raise ConvergenceError(f"primal-dual recursion still moving after {max_iter} steps", best=states)


def optimality_check(problem, W, gamma, tol: float = 1e-7) -> Report:
    states, wbar, V = solve_pd_fixed_point(problem, W, gamma)
    r1, r2 = optimality_residual(states.x, states.y, problem, wbar, V, gamma)
    offenders = [name for name, r in (("r1", r1), ("r2", r2)) if r > tol]
    return Report("optimality", not offenders, lhs=max(r1, r2), rhs=tol, tolerance=tol,
                  offenders=offenders, details={"r1": r1, "r2": r2, "iterations": states.k})


def initial_error_bound_check(problem, gamma, W) -> Report:
    """``||y*||_F^2 <= gamma^2 lazy_lambda2^2 ||grad f(x*)||_F^2 / (1 - lazy_lambda2)``.

    With ``x0 = y0 = 0`` the transformed initial consensus error is dominated
    by ``||y*||_F``, so the check runs on ``y*``.
    """
    spec = W.spectrum
    n = problem.n
    wbar = topo.lazy(W).w
    V = topo.sqrt_psd(np.eye(n) - wbar)
    x_star = problem.optimum()
    y_star = dual_optimum(problem, wbar, V, gamma, x_star)
    lhs = float(np.sum(y_star**2))
    grad_sq = float(np.sum(problem.full_gradient(np.tile(x_star, (n, 1))) ** 2))
    lam2 = spec.lazy_lambda2
    rhs = gamma**2 * lam2**2 * grad_sq / (1.0 - lam2)
    tol = 1e-12 * max(rhs, 1.0)
    passed = lhs <= rhs + tol
    return Report("initial_error_bound", passed, lhs=lhs, rhs=rhs, tolerance=tol,
                  offenders=[] if passed else [{"lhs": lhs, "rhs": rhs}])


# -- accelerated gossip -------------------------------------------------------


def contraction_bound(beta: float, r: int) -> float:
    return math.sqrt(2.0) * (1.0 - math.sqrt(1.0 - beta)) ** r


def contraction_check(W, R: int, eta: float | None = None, eta_rule: str = "chebyshev",
                      rtol: float = 1e-12) -> Report:
    """Exact ``rho(M^(r) - J)`` against ``sqrt(2)(1 - sqrt(1 - beta))^r`` for ``r = 0..R``."""
    a = _mat(W)
    n = a.shape[0]
    beta = W.beta if isinstance(W, topo.MixingMatrix) else topo.spectrum(a).beta
    if eta is None:
        eta = topo.acceleration_eta(beta, eta_rule)
    J = np.full((n, n), 1.0 / n)
    rows, offenders = [], []
    worst = 0.0
    for r, m in enumerate(topo.gossip_matrices(a, R, eta)):
        rho = float(np.max(np.abs(np.linalg.eigvalsh((m + m.T) / 2.0 - J))))
        bound = contraction_bound(beta, r)
        ok = rho <= bound * (1.0 + rtol) + 1e-12
        ratio = rho / bound if bound > 0 else (0.0 if rho == 0 else math.inf)
        worst = max(worst, ratio)
        rows.append({"r": r, "rho": rho, "bound": bound})
        if not ok:
            offenders.append({"r": r, "rho": rho, "bound": bound})
    return Report("contraction", not offenders, lhs=worst, rhs=1.0, tolerance=rtol, offenders=offenders,
                  details={"beta": beta, "eta": eta, "R": R, "rounds": rows})


def clamp_check(W, R: int | None = None, tau: float | None = None, eta: float | None = None,
                eta_rule: str = "chebyshev") -> Report:
    """Non-unit eigenvalues of the damped gossip matrix inside ``[1/(4n), 3/(4n)]``."""
    n = W.n
    beta = W.beta
    if R is None:
        R = topo.multi_gossip_rounds(n, beta)
    gp = topo.fast_gossip_matrix(W, R, eta=eta, tau=tau, eta_rule=eta_rule)
    ev = np.sort(np.linalg.eigvalsh((gp.mbar + gp.mbar.T) / 2.0))[::-1]
    rest = ev[1:]
    lo, hi = 1.0 / (4 * n), 3.0 / (4 * n)
    offenders = [{"k": int(k + 2), "eig": float(e)} for k, e in enumerate(rest) if not lo - 1e-15 <= e <= hi + 1e-15]
    rho = gp.rho()
    if rho > 1.0 / (4 * n):
        offenders.append({"rho": rho, "bound": 1.0 / (4 * n)})
    ratio = float(rest[0] / rest[-1]) if rest.size else 1.0
    if ratio > 3.0 + 1e-12:
        offenders.append({"ratio": ratio})
    return Report("clamp", not offenders, lhs=rho, rhs=1.0 / (4 * n), tolerance=0.0, offenders=offenders,
                  details={"R": R, "tau": gp.tau, "eta": gp.eta, "lambda2": float(rest[0]) if rest.size else None,
                           "lambdan": float(rest[-1]) if rest.size else None, "ratio": ratio})


def invariant_check(W) -> Report:
    problems = W.violations()
    return Report("mixing_invariants", not problems, offenders=problems, details={"name": W.name, "n": W.n})

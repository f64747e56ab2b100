"""Step-size schedules, including the learning rates prescribed by the convergence theorems."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidParameterError


@dataclass(frozen=True)
class RConstants:
    """Constants ``r0..r3`` entering the generally-convex step-size rule."""

    r0: float
    r1: float
    r2: float
    r3: float

    def as_dict(self):
        return {"r0": self.r0, "r1": self.r1, "r2": self.r2, "r3": self.r3}


def r_constants(L, sigma2, n, lambda2bar, lambdanbar, beta, z0, grad_star_sq) -> RConstants:
    """``z0 = ||xbar0 - x*||^2``; ``grad_star_sq = ||grad f(x*)||_F^2`` (sum over nodes)."""
    beta1 = math.sqrt(lambda2bar)
    r0 = 2.0 * z0
    r1 = 2.0 * sigma2 / n
    r2 = 24.0 * L * lambda2bar**2 * sigma2 / ((1.0 - beta1) * lambdanbar)
    r3 = 18.0 * L * lambda2bar**2 * grad_star_sq / (n * (1.0 - beta1) * (1.0 - beta) * lambdanbar)
    return RConstants(r0, r1, r2, r3)


def _ratio_power(num, den, power):
    if den <= 0:
        return math.inf
    return (num / den) ** power


def stepsize_branches_gc(L, beta1, lambda2bar, lambdanbar, T, r: RConstants) -> list[float]:
    if L <= 0:
        raise InvalidParameterError(f"L must be positive, got {L}")
    if r is None:
        raise InvalidParameterError("generally-convex step size needs the r constants")
    return [
        1.0 / (4.0 * L),
        (1.0 - beta1) * math.sqrt(lambdanbar) / (10.0 * L * lambda2bar),
        _ratio_power(r.r0, r.r1 * (T + 1), 0.5),
        _ratio_power(r.r0, r.r2 * (T + 1), 1.0 / 3.0),
        _ratio_power(r.r0, r.r3, 1.0 / 3.0),
    ]


def theorem_stepsize_gc(L, beta1, lambda2bar, lambdanbar, T, r_consts: RConstants) -> float:
    """Minimum over the five generally-convex branches."""
    return min(stepsize_branches_gc(L, beta1, lambda2bar, lambdanbar, T, r_consts))


def stepsize_branches_sc(L, mu, beta1, lambda2bar, lambdanbar, T, z0, sigma2, beta, n=1) -> list[float]:
    if L <= 0 or mu <= 0:
        raise InvalidParameterError(f"need L > 0 and mu > 0, got L={L}, mu={mu}")
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if sigma2 > 0 and beta < 1:
        arg = 2.0 * n * mu * z0 * T**2 / (sigma2 * (1.0 - beta))
    else:
        arg = math.inf
    log_branch = math.inf if math.isinf(arg) else 2.0 * math.log(max(arg, math.e)) / (mu * T)
    return [
        1.0 / (4.0 * L),
        (1.0 - beta1) / (26.0 * L) * (math.sqrt(lambdanbar) / lambda2bar),
        log_branch,
    ]


def theorem_stepsize_sc(L, mu, beta1, lambda2bar, lambdanbar, T, z0, sigma2, beta, n=1) -> float:
    """Strongly-convex rule; the log argument is floored at ``e`` so the result stays positive."""
    return min(stepsize_branches_sc(L, mu, beta1, lambda2bar, lambdanbar, T, z0, sigma2, beta, n))


def halving_stepsize(gamma0: float, comm: int, every: int) -> float:
    """``gamma0`` halved once per ``every`` cumulative communications."""
    return gamma0 * 0.5 ** (comm // every)

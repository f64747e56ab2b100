"""Decentralized stochastic optimisation algorithms and the run loop.

Supported algorithms
--------------------
``psgd``     parallel SGD: exact network average of the node gradients.
``dsgd``     adapt-then-combine decentralized SGD, ``X <- W (X - gamma G)``.
``d2ed``     D^2 / Exact-Diffusion in node form (auxiliary ``psi``), mixing with ``Wbar``.
``d2ed_pd``  the same recursion in primal-dual form with ``V = (I - Wbar)^{1/2}``.
``mg_d2ed``  D^2 / Exact-Diffusion with ``R`` accumulated gradients and ``R``
             accelerated gossip rounds per outer iteration.

Every step function is pure: it returns a new :class:`NodeStates`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import topology as topo
from .errors import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    InvalidParameterError,
    InvariantViolation,
    StateError,
)
from .metrics import MetricsTrace, compute_metrics
from .stepsize import halving_stepsize, r_constants, stepsize_branches_gc, stepsize_branches_sc

ALGORITHMS = ("psgd", "dsgd", "d2ed", "d2ed_pd", "mg_d2ed")
SCHEDULES = ("constant", "halve", "theorem_gc", "theorem_sc")
DIVERGENCE_LIMIT = 1e12

_ALIASES = {"p-sgd": "psgd", "d-sgd": "dsgd", "d2": "d2ed", "ed": "d2ed", "d2ed-pd": "d2ed_pd",
            "mg-d2ed": "mg_d2ed", "mg": "mg_d2ed"}


def canonical_algorithm(name: str) -> str:
    key = name.lower()
    key = _ALIASES.get(key, key)
    if key not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    return key


@dataclass(frozen=True)
class NodeStates:
    """Stacked node iterates plus algorithm-specific auxiliaries."""

    x: np.ndarray
    psi: np.ndarray | None = None
    y: np.ndarray | None = None
    k: int = 0
    comm: int = 0

    @property
    def xbar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    def consensus_error(self) -> float:
        """``||X - 1 xbar^T||_F``."""
        return float(np.linalg.norm(self.x - self.xbar))


def init_states(algorithm: str, x0) -> NodeStates:
    x0 = np.array(x0, dtype=float, copy=True)
    algorithm = canonical_algorithm(algorithm)
    if algorithm in ("d2ed", "mg_d2ed"):
        return NodeStates(x=x0, psi=x0.copy())
    if algorithm == "d2ed_pd":
        return NodeStates(x=x0, y=np.zeros_like(x0))
    if algorithm == "psgd":
        return NodeStates(x=np.tile(x0.mean(axis=0), (x0.shape[0], 1)))
    return NodeStates(x=x0)


def _mat(w) -> np.ndarray:
    return w.w if isinstance(w, topo.MixingMatrix) else np.asarray(w, dtype=float)


def _gradient(problem, X, rng, stochastic: bool):
    if stochastic:
        return problem.stochastic_gradient(X, rng)
    return problem.full_gradient(X)


def psgd_step(states: NodeStates, problem, gamma, rng=None, stochastic=True) -> NodeStates:
    x = states.x
    spread = np.max(np.abs(x - x[0]))
    if spread > 1e-12 * (1.0 + np.max(np.abs(x))):
        raise InvariantViolation(f"parallel SGD needs consensual states (spread {spread:.3e})")
    g = _gradient(problem, x, rng, stochastic)
    xbar = x[0] - gamma * g.mean(axis=0)
    return NodeStates(x=np.tile(xbar, (x.shape[0], 1)), k=states.k + 1, comm=states.comm + 1)


def dsgd_step(states: NodeStates, W, problem, gamma, rng=None, stochastic=True) -> NodeStates:
    w = _mat(W)
    if w.shape[0] != states.x.shape[0]:
        raise DimensionError(f"W is {w.shape} but there are {states.x.shape[0]} nodes")
    g = _gradient(problem, states.x, rng, stochastic)
    x = w @ (states.x - gamma * g)
    return NodeStates(x=x, k=states.k + 1, comm=states.comm + 1)


def d2ed_step(states: NodeStates, Wbar, problem, gamma, rng=None, stochastic=True,
              correction=True) -> NodeStates:
    """Local step, solution correction ``x - psi``, then one combine with ``Wbar``.

    ``correction=False`` drops the correction term, which turns the update into
    D-SGD over ``Wbar``.
    """
    if states.psi is None:
        raise StateError("d2ed_step needs psi; initialise with psi = x0")
    x = states.x
    g = _gradient(problem, x, rng, stochastic)
    psi = x - gamma * g
    phi = psi + (x - states.psi) if correction else psi
    return NodeStates(x=_mat(Wbar) @ phi, psi=psi, k=states.k + 1, comm=states.comm + 1)


def check_sqrt_pair(Wbar, V, tol=1e-8):
    w, v = _mat(Wbar), np.asarray(V, dtype=float)
    err = float(np.max(np.abs(v @ v - (np.eye(w.shape[0]) - w))))
    if err > tol:
        raise ConfigurationError(f"V*V differs from I - Wbar by {err:.3e}")


def d2ed_pd_step(states: NodeStates, Wbar, V, problem, gamma, rng=None, stochastic=True,
                 check=True) -> NodeStates:
    """``x+ = Wbar (x - gamma g) - V y``; ``y+ = y + V x+``."""
    if states.y is None:
        raise StateError("d2ed_pd_step needs the dual variable; initialise y = 0")
    if check:
        check_sqrt_pair(Wbar, V)
    g = _gradient(problem, states.x, rng, stochastic)
    x = _mat(Wbar) @ (states.x - gamma * g) - V @ states.y
    y = states.y + V @ x
    return NodeStates(x=x, y=y, k=states.k + 1, comm=states.comm + 1)


def fast_gossip_average(phi, W, R: int, tau: float, eta: float) -> np.ndarray:
    """``R`` rounds of ``z+ = (1 + eta) W z - eta z_prev`` from ``z = z_prev = phi``,
    then output ``(1 - tau) z + tau phi``."""
    w = _mat(W)
    prev = cur = np.asarray(phi, dtype=float)
    for _ in range(R):
        prev, cur = cur, (1.0 + eta) * (w @ cur) - eta * prev
    return (1.0 - tau) * cur + tau * phi


def accumulated_gradient(problem, X, R: int, rng, stochastic=True) -> np.ndarray:
    if not stochastic:
        return problem.full_gradient(X)
    g = problem.stochastic_gradient(X, rng)
    for _ in range(R - 1):
        g = g + problem.stochastic_gradient(X, rng)
    return g / R


def mg_d2ed_step(states: NodeStates, W, problem, gamma, R, tau, eta, rng=None,
                 stochastic=True) -> NodeStates:
    """One outer iteration: ``R`` sampled gradients and ``R`` gossip rounds."""
    if states.psi is None:
        raise StateError("mg_d2ed_step needs psi; initialise with psi = x0")
    x = states.x
    g = accumulated_gradient(problem, x, R, rng, stochastic)
    psi = x - gamma * g
    phi = psi + x - states.psi
    x_new = fast_gossip_average(phi, W, R, tau, eta)
    return NodeStates(x=x_new, psi=psi, k=states.k + 1, comm=states.comm + R)


# -- run loop -----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run besides the topology and the problem.

    ``T`` is the budget in gossip communications. Single-round algorithms
    perform ``T`` iterations; ``mg_d2ed`` performs ``T // R`` outer loops.
    """

    algorithm: str = "d2ed"
    gamma: float = 0.01
    schedule: str = "constant"
    halve_every: int = 2000
    T: int = 1000
    R: int | None = None
    tau: float | None = None
    eta: float | None = None
    eta_rule: str = "chebyshev"
    seed: int = 0
    record_every: int = 1
    stochastic: bool = True
    x0: str = "zeros"

    def __post_init__(self):
        object.__setattr__(self, "algorithm", canonical_algorithm(self.algorithm))
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.schedule in ("constant", "halve") and not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.T < 0:
            raise ConfigurationError(f"T must be >= 0, got {self.T}")
        if self.R is not None and self.R < 1:
            raise ConfigurationError(f"R must be >= 1, got {self.R}")
        if self.tau is not None and not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.record_every < 1:
            raise ConfigurationError(f"record_every must be >= 1, got {self.record_every}")
        if self.halve_every < 1:
            raise ConfigurationError(f"halve_every must be >= 1, got {self.halve_every}")
        if self.x0 not in ("zeros", "optimum"):
            raise ConfigurationError(f"x0 must be 'zeros' or 'optimum', got {self.x0!r}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def key(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class _Plan:
    gamma: float
    R: int = 1
    tau: float = 0.0
    eta: float = 0.0
    extras: dict = field(default_factory=dict)


def _theorem_gamma(config: RunConfig, W: topo.MixingMatrix, problem, R, gp) -> tuple[float, dict]:
    n = problem.n
    x_star = problem.optimum()
    z0 = float(np.sum((np.zeros(problem.d) - x_star) ** 2)) if config.x0 == "zeros" else 0.0
    sigma2 = problem.sigma2 if config.stochastic else 0.0
    if config.algorithm == "mg_d2ed":
        ev = np.sort(np.linalg.eigvalsh(gp.mbar))[::-1]
        lam2, lamn = float(ev[1]), float(ev[-1])
        beta = gp.rho()
        sigma2 = sigma2 / R
        horizon = max(config.T // R, 1)
    else:
        spec = W.spectrum
        lam2, lamn, beta = spec.lazy_lambda2, spec.lazy_lambdan, spec.beta
        horizon = max(config.T, 1)
    beta1 = math.sqrt(lam2)
    L = problem.L
    extras = {"lambda2bar": lam2, "lambdanbar": lamn, "beta": beta, "sigma2": sigma2, "horizon": horizon}
    if config.schedule == "theorem_sc":
        branches = stepsize_branches_sc(L, problem.mu, beta1, lam2, lamn, horizon, z0, sigma2, beta, n)
    else:
        grad_sq = float(np.sum(problem.full_gradient(np.tile(x_star, (n, 1))) ** 2))
        rc = r_constants(L, sigma2, n, lam2, lamn, beta, z0, grad_sq)
        extras["r_constants"] = rc.as_dict()
        branches = stepsize_branches_gc(L, beta1, lam2, lamn, horizon, rc)
    extras["branches"] = [b if math.isfinite(b) else None for b in branches]
    return min(branches), extras


def plan_run(config: RunConfig, W: topo.MixingMatrix, problem) -> _Plan:
    """Resolve defaults (R, tau, eta) and theorem-based step sizes."""
    if W.n != problem.n:
        raise DimensionError(f"topology has {W.n} nodes but the problem has {problem.n}")
    plan = _Plan(gamma=config.gamma)
    gp = None
    if config.algorithm == "mg_d2ed":
        beta = W.beta
        plan.R = config.R if config.R is not None else topo.multi_gossip_rounds(W.n, beta)
        plan.tau = config.tau if config.tau is not None else 1.0 / (2.0 * W.n)
        plan.eta = config.eta if config.eta is not None else topo.acceleration_eta(beta, config.eta_rule)
        if not 0.0 <= plan.eta < 1.0:
            raise InvalidParameterError(f"eta must lie in [0, 1), got {plan.eta}")
        if config.schedule.startswith("theorem"):
            gp = topo.fast_gossip_matrix(W, plan.R, eta=plan.eta, tau=plan.tau)
    if config.schedule.startswith("theorem"):
        plan.gamma, plan.extras = _theorem_gamma(config, W, problem, plan.R, gp)
    return plan


def _manifest(config, W, problem, plan) -> dict:
    return {
        "config": config.as_dict(),
        "config_key": config.key(),
        "topology": {"name": W.name, "n": W.n, "beta": W.beta, "inv_gap": W.spectrum.inv_gap,
                     "hash": W.digest()},
        "problem": {"kind": problem.kind, "n": problem.n, "d": problem.d, "M": problem.M,
                    "hash": problem.digest(), "params": problem.meta},
        "resolved": {"gamma": plan.gamma, "R": plan.R, "tau": plan.tau, "eta": plan.eta, **plan.extras},
    }


def run(config: RunConfig, W: topo.MixingMatrix, problem, x0=None) -> MetricsTrace:
    """Execute one run and return its trace.

    Metrics are recorded at the start and then every ``record_every``
    iterations (outer loops for ``mg_d2ed``), plus the final iterate.
    Raises :class:`DivergenceError` carrying the partial trace when
    ``||X||_F`` exceeds 1e12.
    """
    plan = plan_run(config, W, problem)
    manifest = _manifest(config, W, problem, plan)
    alg = config.algorithm
    n, d = problem.n, problem.d
    if x0 is None:
        x0 = np.tile(problem.optimum(), (n, 1)) if config.x0 == "optimum" else np.zeros((n, d))
    states = init_states(alg, x0)
    rng = np.random.default_rng(config.seed)
    w = W.w
    wbar = topo.lazy(W).w
    V = topo.sqrt_psd(np.eye(n) - wbar) if alg == "d2ed_pd" else None
    if V is not None:
        check_sqrt_pair(wbar, V)
    per_step = plan.R if alg == "mg_d2ed" else 1
    steps = config.T // per_step
    stoch = config.stochastic

    records = [{"comm": 0, "iter": 0, **compute_metrics(states.x, problem)}]
    for _ in range(steps):
        if config.schedule == "halve":
            gamma = halving_stepsize(plan.gamma, states.comm, config.halve_every)
        else:
            gamma = plan.gamma
        if alg == "psgd":
            states = psgd_step(states, problem, gamma, rng, stoch)
        elif alg == "dsgd":
            states = dsgd_step(states, w, problem, gamma, rng, stoch)
        elif alg == "d2ed":
            states = d2ed_step(states, wbar, problem, gamma, rng, stoch)
        elif alg == "d2ed_pd":
            states = d2ed_pd_step(states, wbar, V, problem, gamma, rng, stoch, check=False)
        else:
            states = mg_d2ed_step(states, w, problem, gamma, plan.R, plan.tau, plan.eta, rng, stoch)
        norm = np.linalg.norm(states.x)
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            partial = MetricsTrace.from_records(records, {**manifest, "diverged_at": states.k})
            raise DivergenceError(f"{alg} diverged at iteration {states.k} (||X||_F = {norm:.3e})",
                                  iteration=states.k, trace=partial)
        if states.k % config.record_every == 0 or states.k == steps:
            records.append({"comm": states.comm, "iter": states.k, **compute_metrics(states.x, problem)})
    return MetricsTrace.from_records(records, manifest)

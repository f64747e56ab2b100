import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decentsim import algorithms as alg
from decentsim import problems as probs
from decentsim import topology as topo
from decentsim.errors import ConfigurationError, DimensionError, DivergenceError, InvariantViolation, StateError


@pytest.fixture(scope="module")
def het():
    return probs.gen_least_squares(8, 5, 40, 1.0, 0.0, seed=11)


@pytest.fixture(scope="module")
def noisy():
    return probs.gen_least_squares(8, 5, 40, 1.0, 0.5, seed=12)


def pd_pair(W):
    wbar = topo.lazy(W).w
    return wbar, topo.sqrt_psd(np.eye(W.n) - wbar)


# -- P-SGD ---------------------------------------------------------------------


def test_psgd_zero_step(noisy):
    s = alg.init_states("psgd", np.ones((8, 5)))
    out = alg.psgd_step(s, noisy, 0.0, np.random.default_rng(0))
    assert np.array_equal(out.x, s.x) and out.comm == 1


def test_psgd_rejects_spread(noisy):
    s = alg.NodeStates(x=np.random.default_rng(0).standard_normal((8, 5)))
    with pytest.raises(InvariantViolation):
        alg.psgd_step(s, noisy, 0.1, np.random.default_rng(0))


def test_psgd_deterministic_monotone(het):
    s = alg.init_states("psgd", np.zeros((8, 5)))
    f = [het.loss(s.xbar)]
    for _ in range(50):
        s = alg.psgd_step(s, het, 1.0 / het.L, stochastic=False)
        f.append(het.loss(s.xbar))
        assert np.ptp(s.x, axis=0).max() == 0.0
    assert np.all(np.diff(f) <= 1e-12)


def test_complete_graph_dsgd_equals_psgd(het):
    W = topo.build_complete(8)
    a = alg.init_states("dsgd", np.zeros((8, 5)))
    b = alg.init_states("psgd", np.zeros((8, 5)))
    for _ in range(30):
        a = alg.dsgd_step(a, W, het, 1e-3, stochastic=False)
        b = alg.psgd_step(b, het, 1e-3, stochastic=False)
    assert np.allclose(a.x, b.x, atol=1e-12)


# -- D-SGD ---------------------------------------------------------------------


def test_dsgd_single_node_is_sgd(noisy):
    p = probs.gen_least_squares(1, 3, 10, 0.0, 0.5, seed=0)
    s = alg.NodeStates(x=np.ones((1, 3)))
    g = p.stochastic_gradient(s.x, np.random.default_rng(4))
    out = alg.dsgd_step(s, np.eye(1), p, 0.01, np.random.default_rng(4))
    assert np.allclose(out.x, s.x - 0.01 * g)
    assert out.comm == 1


def test_dsgd_dimension_mismatch(het):
    with pytest.raises(DimensionError):
        alg.dsgd_step(alg.NodeStates(x=np.zeros((8, 5))), np.eye(3), het, 0.1, stochastic=False)


def test_dsgd_jumps_away_from_optimum(het):
    W = topo.build_cycle(8)
    X = np.tile(het.optimum(), (8, 1))
    gamma = 1e-3
    out = alg.dsgd_step(alg.NodeStates(x=X), W, het, gamma, stochastic=False)
    disp = np.linalg.norm(out.x - X)
    assert disp == pytest.approx(gamma * np.linalg.norm(W.w @ het.full_gradient(X)), rel=1e-10)
    assert disp > 0


def test_dsgd_and_d2ed_stay_at_homogeneous_optimum():
    p = probs.gen_least_squares(6, 3, 20, 0.0, 0.0, seed=2)
    W = topo.build_cycle(6)
    X = np.tile(p.optimum(), (6, 1))
    a = alg.NodeStates(x=X)
    b = alg.init_states("d2ed", X)
    for _ in range(20):
        a = alg.dsgd_step(a, W, p, 1e-3, stochastic=False)
        b = alg.d2ed_step(b, topo.lazy(W), p, 1e-3, stochastic=False)
    assert np.abs(a.x - X).max() <= 1e-10 and np.abs(b.x - X).max() <= 1e-10


# -- D2/ED ---------------------------------------------------------------------


def test_d2ed_requires_psi(het):
    with pytest.raises(StateError):
        alg.d2ed_step(alg.NodeStates(x=np.zeros((8, 5))), np.eye(8), het, 0.1)


def test_d2ed_first_step_is_combine_after_local_step(noisy):
    W = topo.build_cycle(8)
    wbar = topo.lazy(W).w
    x0 = np.random.default_rng(0).standard_normal((8, 5))
    g = noisy.stochastic_gradient(x0, np.random.default_rng(3))
    s = alg.d2ed_step(alg.init_states("d2ed", x0), wbar, noisy, 0.01, np.random.default_rng(3))
    assert np.allclose(s.x, wbar @ (x0 - 0.01 * g))


def test_d2ed_without_correction_is_dsgd_over_lazy(noisy):
    wbar = topo.lazy(topo.build_cycle(8)).w
    x0 = np.random.default_rng(1).standard_normal((8, 5))
    a = alg.init_states("d2ed", x0)
    b = alg.NodeStates(x=x0)
    ra, rb = np.random.default_rng(7), np.random.default_rng(7)
    for _ in range(25):
        a = alg.d2ed_step(a, wbar, noisy, 1e-3, ra, correction=False)
        b = alg.dsgd_step(b, wbar, noisy, 1e-3, rb)
    assert np.array_equal(a.x, b.x)


def test_d2ed_zero_step_freezes_after_first_combine(noisy):
    wbar = topo.lazy(topo.build_cycle(8)).w
    x0 = np.random.default_rng(1).standard_normal((8, 5))
    s = alg.d2ed_step(alg.init_states("d2ed", x0), wbar, noisy, 0.0, np.random.default_rng(0))
    first = s.x.copy()
    for _ in range(5):
        s = alg.d2ed_step(s, wbar, noisy, 0.0, np.random.default_rng(0))
    # with gamma = 0 the recursion is x+ = Wbar(2x - x_prev); mean preserved, deviations damped
    assert np.allclose(s.x.mean(axis=0), first.mean(axis=0), atol=1e-12)


def test_d2ed_exact_on_heterogeneous(het):
    W = topo.build_cycle(8)
    wbar = topo.lazy(W).w
    s = alg.init_states("d2ed", np.zeros((8, 5)))
    for _ in range(4000):
        s = alg.d2ed_step(s, wbar, het, 1 / (4 * het.L), stochastic=False)
    assert np.linalg.norm(s.xbar - het.optimum()) <= 1e-9
    assert np.linalg.norm(s.x - het.optimum()) / math.sqrt(8) <= 1e-8


def test_dsgd_plateaus_on_heterogeneous(het):
    W = topo.build_cycle(8)
    s = alg.NodeStates(x=np.zeros((8, 5)))
    for _ in range(4000):
        s = alg.dsgd_step(s, W, het, 1 / (4 * het.L), stochastic=False)
    assert np.sum((s.x - het.optimum()) ** 2) / 8 > 1e-6


# -- primal-dual form ---------------------------------------------------------


def test_pd_matches_node_form(noisy):
    W = topo.build_cycle(8)
    wbar, V = pd_pair(W)
    x0 = np.zeros((8, 5))
    a, b = alg.init_states("d2ed", x0), alg.init_states("d2ed_pd", x0)
    ra, rb = np.random.default_rng(3), np.random.default_rng(3)
    for _ in range(100):
        a = alg.d2ed_step(a, wbar, noisy, 1e-3, ra)
        b = alg.d2ed_pd_step(b, wbar, V, noisy, 1e-3, rb)
        assert np.linalg.norm(a.x - b.x) <= 1e-10
        assert np.abs(b.y.sum(axis=0)).max() <= 1e-10


def test_pd_rejects_bad_sqrt(noisy):
    wbar = topo.lazy(topo.build_cycle(8)).w
    with pytest.raises(ConfigurationError):
        alg.d2ed_pd_step(alg.init_states("d2ed_pd", np.zeros((8, 5))), wbar, np.eye(8), noisy, 0.1)


def test_pd_fixed_point_is_stationary(het):
    from decentsim.analysis import dual_optimum
    W = topo.build_cycle(8)
    wbar, V = pd_pair(W)
    gamma = 1 / (4 * het.L)
    X = np.tile(het.optimum(), (8, 1))
    y = dual_optimum(het, wbar, V, gamma)
    s = alg.d2ed_pd_step(alg.NodeStates(x=X, y=y), wbar, V, het, gamma, stochastic=False)
    assert np.abs(s.x - X).max() <= 1e-10 and np.abs(s.y - y).max() <= 1e-10


def test_pd_zero_step_consensual_stationary(noisy):
    wbar, V = pd_pair(topo.build_cycle(8))
    X = np.tile(np.arange(5.0), (8, 1))
    s = alg.d2ed_pd_step(alg.init_states("d2ed_pd", X), wbar, V, noisy, 0.0, np.random.default_rng(0))
    assert np.allclose(s.x, X, atol=1e-13) and np.allclose(s.y, 0, atol=1e-13)


@given(st.integers(0, 1000), st.integers(3, 10))
def test_mean_dynamics_identity(seed, n):
    p = probs.gen_least_squares(n, 3, 10, 1.0, 0.5, seed=seed)
    W = topo.build_random(n, 0.5, seed)
    wbar, V = pd_pair(W)
    s = alg.init_states("d2ed_pd", np.zeros((n, 3)))
    for k in range(10):
        g = p.stochastic_gradient(s.x, np.random.default_rng([seed, k]))
        nxt = alg.d2ed_pd_step(s, wbar, V, p, 0.01, np.random.default_rng([seed, k]))
        assert np.allclose(nxt.xbar, s.xbar - 0.01 * g.mean(axis=0), atol=1e-12)
        s = nxt


# -- fast gossip and MG-D2/ED -------------------------------------------------


def test_fast_gossip_consensual_input_unchanged():
    W = topo.build_cycle(10)
    phi = np.tile(np.array([1.0, -2.0, 3.0]), (10, 1))
    assert np.allclose(alg.fast_gossip_average(phi, W, 7, 0.05, 0.4), phi)


def test_fast_gossip_one_round():
    W = topo.build_cycle(10)
    phi = np.random.default_rng(0).standard_normal((10, 3))
    out = alg.fast_gossip_average(phi, W, 1, 0.0, 0.4)
    assert np.allclose(out, (1.4 * W.w - 0.4 * np.eye(10)) @ phi)


@given(st.integers(3, 20), st.integers(0, 10_000))
def test_fast_gossip_matches_matrix_and_preserves_mean(n, seed):
    W = topo.build_cycle(n)
    R = topo.multi_gossip_rounds(n, W.beta)
    gp = topo.fast_gossip_matrix(W, R)
    phi = np.random.default_rng(seed).standard_normal((n, 4))
    out = alg.fast_gossip_average(phi, W, R, gp.tau, gp.eta)
    assert np.allclose(out, gp.mbar @ phi, atol=1e-10)
    assert np.allclose(out.mean(axis=0), phi.mean(axis=0), atol=1e-12)
    dev_in = np.linalg.norm(phi - phi.mean(axis=0))
    assert np.linalg.norm(out - out.mean(axis=0)) <= 3 / (4 * n) * dev_in + 1e-12


def test_mg_reduces_to_d2ed_with_plain_gossip(noisy):
    W = topo.build_cycle(8)
    x0 = np.random.default_rng(2).standard_normal((8, 5))
    a, b = alg.init_states("mg_d2ed", x0), alg.init_states("d2ed", x0)
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(20):
        a = alg.mg_d2ed_step(a, W, noisy, 1e-3, 1, 0.0, 0.0, ra)
        b = alg.d2ed_step(b, W.w, noisy, 1e-3, rb)
    assert np.allclose(a.x, b.x, atol=1e-12)
    assert a.comm == 20


def test_mg_counts_R_communications(noisy):
    W = topo.build_cycle(8)
    s = alg.mg_d2ed_step(alg.init_states("mg_d2ed", np.zeros((8, 5))), W, noisy, 1e-3, 6, 0.1, 0.3,
                         np.random.default_rng(0))
    assert s.comm == 6 and s.k == 1


@pytest.mark.parametrize("R", [1, 4, 16])
def test_accumulated_gradient_variance(R):
    p = probs.gen_least_squares(2, 3, 50, 1.0, 1.0, seed=5)
    X = np.tile(p.optimum(), (2, 1))
    rng = np.random.default_rng(R)
    draws = np.stack([alg.accumulated_gradient(p, X, R, rng) for _ in range(10_000)])
    emp = np.mean(np.sum((draws - p.full_gradient(X)) ** 2, axis=2), axis=0)
    assert np.allclose(emp, p.sample_variance(X) / R, rtol=0.2)


def test_mg_exact_on_heterogeneous(het):
    W = topo.build_cycle(8)
    R = topo.multi_gossip_rounds(8, W.beta)
    eta = topo.chebyshev_eta(W.beta)
    s = alg.init_states("mg_d2ed", np.zeros((8, 5)))
    for _ in range(3000):
        s = alg.mg_d2ed_step(s, W, het, 1 / (4 * het.L), R, 1 / 16, eta, stochastic=False)
    assert np.linalg.norm(s.x - het.optimum()) / math.sqrt(8) <= 1e-9


# -- config and run -------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [dict(gamma=0.0), dict(R=0), dict(tau=1.0), dict(record_every=0),
                                    dict(schedule="cosine"), dict(algorithm="adam"), dict(T=-1)])
def test_run_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        alg.RunConfig(**kwargs)


def test_algorithm_aliases():
    assert alg.RunConfig(algorithm="mg-d2ed").algorithm == "mg_d2ed"
    assert alg.canonical_algorithm("D-SGD") == "dsgd"


def test_run_zero_budget(noisy):
    tr = alg.run(alg.RunConfig("d2ed", gamma=1e-3, T=0), topo.build_cycle(8), noisy)
    assert len(tr) == 1 and tr.comm[0] == 0


def test_run_deterministic(noisy):
    cfg = alg.RunConfig("dsgd", gamma=1e-3, T=50, seed=4, record_every=5)
    a = alg.run(cfg, topo.build_cycle(8), noisy)
    b = alg.run(cfg, topo.build_cycle(8), noisy)
    assert a.to_csv() == b.to_csv()
    assert np.all(np.diff(a.comm) > 0)


def test_run_divergence(noisy):
    cfg = alg.RunConfig("dsgd", gamma=10.0, T=100)
    with pytest.raises(DivergenceError) as exc:
        alg.run(cfg, topo.build_cycle(8), noisy)
    assert exc.value.iteration is not None and len(exc.value.trace) >= 1


def test_run_mg_manifest_records_defaults(noisy):
    W = topo.build_cycle(8)
    tr = alg.run(alg.RunConfig("mg_d2ed", gamma=1e-4, T=100), W, noisy)
    R = math.ceil((math.log(8) + 4) / math.sqrt(1 - W.beta))
    assert tr.manifest["resolved"]["R"] == R
    assert tr.manifest["resolved"]["tau"] == pytest.approx(1 / 16)
    assert tr.comm[-1] == (100 // R) * R


def test_run_halving_on_communications(noisy):
    cfg = alg.RunConfig("dsgd", gamma=1e-3, schedule="halve", halve_every=10, T=30)
    plan = alg.plan_run(cfg, topo.build_cycle(8), noisy)
    assert plan.gamma == 1e-3


def test_run_theorem_schedules(noisy):
    W = topo.build_cycle(8)
    for sched in ("theorem_gc", "theorem_sc"):
        for a in ("d2ed", "mg_d2ed"):
            tr = alg.run(alg.RunConfig(a, schedule=sched, T=200, record_every=50), W, noisy)
            res = tr.manifest["resolved"]
            assert 0 < res["gamma"] <= 1 / (4 * noisy.L)
            assert len(res["branches"]) == (5 if sched == "theorem_gc" else 3)


def test_run_dimension_mismatch(noisy):
    with pytest.raises(DimensionError):
        alg.run(alg.RunConfig(T=1), topo.build_cycle(5), noisy)


def test_run_start_at_optimum(het):
    tr = alg.run(alg.RunConfig("d2ed", gamma=1e-3, T=5, stochastic=False, x0="optimum"), topo.build_cycle(8), het)
    assert tr.mse[0] == 0.0

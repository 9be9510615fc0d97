import numpy as np
import pytest

from smpjump.adjoint import (AdmissibilityError, adjoint_K, adjoint_p, anchor_duality, compute_adjoints,
                             compute_K, require_admissible, second_moment_proxy)
from smpjump.noise import Brownian, MarkSpace, TimeGrid, sample_ensemble
from smpjump.state import ConstantPolicy, CostSpec, first_variation, simulate_state
from smpjump.toys import quadratic_toy, toy_policy

from test_state import geometric


@pytest.fixture(scope="module")
def geo_states(brownian16):
    return simulate_state(brownian16, geometric(), ConstantPolicy([0.2], [-1], [1]))


def running_cost():
    return CostSpec(lambda ctx, u, x: x, lambda ctx, u, x: np.ones_like(x),
                    lambda ctx, u, x: np.zeros(u.shape), lambda x: x ** 2, lambda x: 2 * x)


def test_K_is_terminal_gradient_plus_tail_sum(geo_states):
    K = adjoint_K(geo_states, running_cost())
    X = geo_states.X
    dt = geo_states.ensemble.dt
    for k in (0, 7, 16):
        expected = 2 * X[:, -1] + (16 - k) * dt
        assert np.allclose(K[k], expected, rtol=1e-12)


def test_p_matches_brute_force_sum(geo_states):
    rng = np.random.default_rng(1)
    n = geo_states.n_paths
    K = rng.normal(size=(17, n))
    F = rng.normal(size=(16, n))
    p = adjoint_p(geo_states, K, F)
    dt = geo_states.ensemble.dt
    for k in (0, 9, 15):
        G = first_variation(geo_states, k)  # G[:, j] = G_{k+j}(k)
        brute = K[k] + sum(F[s] * G[:, s - k] for s in range(k, 16)) * dt
        assert np.allclose(p[k], brute, rtol=1e-10, atol=1e-12)
    assert np.array_equal(p[16], K[16])


def test_toy_adjoints_are_constant_derivative(brownian16):
    fit = sample_ensemble(Brownian(), brownian16.grid, MarkSpace.singleton(), 20_000, seed=99)
    sde, cost = quadratic_toy(0.5)
    states = simulate_state(brownian16, sde, toy_policy(1.0))
    fit_states = simulate_state(fit, sde, toy_policy(1.0))
    b = compute_adjoints(states, cost, 2, fit_states=fit_states)
    assert not np.any(b.F_tm)
    assert np.array_equal(b.p_tm, b.K_tm)
    assert b.kappa is b.DK
    # D(-2 X_T) = -2c with c = 0.5
    assert abs(b.kappa_grid_tm.mean() + 1.0) < 0.05
    rec = anchor_duality(states, b.K_tm, b.DK, 4)
    assert rec.passed()
    assert not rec.single_ensemble


def test_second_moment_proxy_flags_instability():
    stable = second_moment_proxy(np.random.default_rng(0).normal(size=1000), "z")
    assert stable["stable"] and stable["finite"]
    spike = np.zeros(1000)
    spike[-1] = 1e6
    bad = second_moment_proxy(spike, "spike")
    assert not bad["stable"]
    with pytest.raises(AdmissibilityError):
        require_admissible([stable, bad])
    assert not second_moment_proxy(np.array([1.0, np.inf]), "inf")["finite"]
    assert second_moment_proxy(np.zeros(4), "zero")["stable"]


def test_level_must_divide_grid(geo_states):
    with pytest.raises(ValueError):
        compute_K(geo_states, running_cost(), 5)

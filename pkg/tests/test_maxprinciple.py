import numpy as np
import pytest

from smpjump.adjoint import compute_adjoints
from smpjump.maxprinciple import (OptimizerConfig, conditional_projection, criticality_score,
                                  hamiltonian_gradient, optimize_policy, project_gradient,
                                  projection_basis, projection_context, theorem_consistency)
from smpjump.noise import Brownian, CompensatedPoisson, MarkSpace, TimeGrid, sample_ensemble
from smpjump.state import simulate_state
from smpjump.toys import quadratic_toy, toy_policy


@pytest.fixture(scope="module")
def toy():
    grid = TimeGrid(1.0, 16)
    e = sample_ensemble(CompensatedPoisson(1.0), grid, MarkSpace.singleton(), 20_000, 21)
    fit = sample_ensemble(CompensatedPoisson(1.0), grid, MarkSpace.singleton(), 20_000, 22)
    sde, cost = quadratic_toy(0.5)
    states = simulate_state(e, sde, toy_policy(1.0))
    bundle = compute_adjoints(states, cost, 4, fit_states=simulate_state(fit, sde, toy_policy(1.0)))
    grad = hamiltonian_gradient(states, cost, bundle)
    project_gradient(grad, projection_basis(states), projection_context(states))
    return states, cost, bundle, grad


def test_projected_gradient_matches_closed_form(toy):
    states, _, _, grad = toy
    t = states.ensemble.grid.edges[:-1]
    exact = -2.0 * (states.X_tm[:-1] + 1.0 * (1.0 - t)[:, None])
    err = grad.projected.values_tm[:, :, 0] - exact
    assert np.sqrt(np.mean(err ** 2)) < 0.05


def test_raw_gradient_is_p_for_the_toy(toy):
    states, _, bundle, grad = toy
    assert np.array_equal(grad.raw_tm[:, :, 0], bundle.p_tm[:-1])


def test_projection_is_idempotent(toy):
    states, _, _, grad = toy
    proj = grad.projected
    assert conditional_projection(proj, proj.basis, proj.context) is proj
    again = conditional_projection(proj.values, proj.basis, proj.context)
    assert np.allclose(again.values_tm, proj.values_tm, atol=1e-9)


def test_consistency_with_gateaux(toy):
    states, cost, bundle, grad = toy
    n = states.n_paths
    for anchor in (0, 4, 12):
        # alpha must be known at the anchor
        w = states.ensemble.running_noise_tm[anchor][:, 0]
        for alpha in (0.5 * np.ones(n), 0.25 + 0.25 * (w > 0)):
            rec = theorem_consistency(states, cost, grad, bundle, alpha, anchor, 4)
            assert rec.passed(), rec


def test_score_positive_away_from_optimum(toy):
    _, _, _, grad = toy
    s = criticality_score(grad)
    assert s.score > 10 * s.std_error
    assert s.profile.shape == (16,)


def test_score_requires_projection(toy):
    states, cost, bundle, _ = toy
    with pytest.raises(ValueError):
        criticality_score(hamiltonian_gradient(states, cost, bundle))


def test_optimizer_reaches_toy_optimum():
    grid = TimeGrid(1.0, 8)
    e = sample_ensemble(Brownian(), grid, MarkSpace.singleton(), 5000, 3)
    fit = sample_ensemble(Brownian(), grid, MarkSpace.singleton(), 5000, 4)
    sde, cost = quadratic_toy(0.5)
    cfg = OptimizerConfig(max_iter=15, step0=0.4, refit_period=1, theta_tolerance=1e-6)
    pol, trace = optimize_policy(e, sde, cost, toy_policy(1.0), cfg, fit)
    assert abs(pol.theta[0]) < 0.02
    assert trace.entries[0].gradient[0] == pytest.approx(-2.0, abs=0.1)
    assert trace.termination in ("max_iter", "parameter change below tolerance")


def test_step_schedule():
    cfg = OptimizerConfig(step0=1.0, decay=10.0)
    assert cfg.step(0) == 1.0 and cfg.step(10) == 0.5

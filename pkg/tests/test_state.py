import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpjump.state import (ConstantPolicy, ControlledSDESpec, CostSpec, ProportionalPolicy,
                           finite_difference_gateaux, first_variation, gateaux_derivative,
                           performance, simulate_state, variation_process)
from smpjump.toys import quadratic_toy, toy_policy


def geometric(a=0.1, s=0.3):
    return ControlledSDESpec(
        x0=1.0, n_controls=1, n_marks=1,
        drift=lambda ctx, u, x: (a + u[:, 0]) * x,
        jump=lambda ctx, u, x: (s * x)[:, None],
        drift_x=lambda ctx, u, x: a + u[:, 0],
        drift_u=lambda ctx, u, x: x[:, None],
        jump_x=lambda ctx, u, x: np.full((x.shape[0], 1), s),
        jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)))


def test_euler_matches_product_form(brownian16):
    e = brownian16
    st_ = simulate_state(e, geometric(), ConstantPolicy([0.2], [-1], [1]))
    factors = 1.0 + 0.3 * e.dt + 0.3 * e.increments[:, :, 0]
    assert np.allclose(st_.X[:, -1], np.prod(factors, axis=1), rtol=1e-12)


def test_first_variation_of_linear_sde_is_state_ratio(brownian16):
    st_ = simulate_state(brownian16, geometric(), ConstantPolicy([0.2], [-1], [1]))
    for anchor in (0, 5, 16):
        G = first_variation(st_, anchor)
        assert G.shape == (st_.n_paths, 17 - anchor)
        assert np.all(G[:, 0] == 1.0)
        assert np.allclose(G[:, -1], st_.X[:, -1] / st_.X[:, anchor], rtol=1e-12)


def test_toy_state_closed_form(poisson16):
    sde, cost = quadratic_toy(0.5)
    st_ = simulate_state(poisson16, sde, toy_policy(0.7))
    assert np.allclose(st_.X[:, -1], 0.7 + 0.5 * poisson16.terminal_noise(), atol=1e-12)
    assert performance(st_, cost).value == pytest.approx(-(0.49 + 0.25 * 2.0), abs=0.05)


def test_variation_of_toy_is_integrated_perturbation(poisson16):
    sde, cost = quadratic_toy(0.5)
    st_ = simulate_state(poisson16, sde, toy_policy(0.7))
    beta = np.linspace(0.0, 1.0, 16)[None, :].repeat(st_.n_paths, axis=0)
    Y = variation_process(st_, beta)
    assert np.allclose(Y[:, -1], beta.sum(axis=1) * poisson16.dt, atol=1e-12)


def test_variation_is_linear_under_power_of_two_scaling(brownian16):
    st_ = simulate_state(brownian16, geometric(), ConstantPolicy([0.2], [-1], [1]))
    rng = np.random.default_rng(0)
    beta = 0.1 * rng.uniform(size=(st_.n_paths, 16))
    assert np.array_equal(variation_process(st_, beta / 2), variation_process(st_, beta) / 2)
    assert np.array_equal(variation_process(st_, -beta), -variation_process(st_, beta))


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.05, 0.4))
def test_gateaux_matches_central_difference_for_quadratic_cost(theta, b):
    # J is quadratic in h for the toy, so the central difference is exact
    e = _ens()
    sde, cost = quadratic_toy(0.5)
    st_ = simulate_state(e, sde, toy_policy(theta, bound=2.0))
    beta = np.full((e.n_paths, e.n_steps), b)
    g = gateaux_derivative(st_, cost, beta, check=False).value
    fd = finite_difference_gateaux(st_, cost, beta, 0.25).value
    assert g == pytest.approx(fd, rel=1e-9, abs=1e-12)


_E = {}


def _ens():
    if "e" not in _E:
        from smpjump.noise import CompensatedPoisson, MarkSpace, TimeGrid, sample_ensemble
        _E["e"] = sample_ensemble(CompensatedPoisson(1.0), TimeGrid(1.0, 8), MarkSpace.singleton(), 2000, 5)
    return _E["e"]


def test_wrong_derivative_callback_is_rejected():
    with pytest.raises(ValueError, match="finite differences"):
        ControlledSDESpec(0.0, 1, 1,
                          drift=lambda ctx, u, x: x ** 2,
                          jump=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                          drift_x=lambda ctx, u, x: x,
                          drift_u=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                          jump_x=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                          jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)))
    bad = CostSpec.terminal_only(lambda x: x ** 3, lambda x: x ** 2)
    with pytest.raises(ValueError):
        bad.validate()
    assert max(quadratic_toy()[1].validate().values()) < 1e-6


def test_policy_boxes():
    pol = ConstantPolicy([0.5], [0.0], [1.0])
    assert np.array_equal(pol.project([2.0]), [1.0 - 1e-3])
    with pytest.raises(ValueError):
        ConstantPolicy([1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        ConstantPolicy([0.5], [1.0], [0.0])
    prop = ProportionalPolicy([0.3], [0.0], [1.0])
    x = np.array([1.0, 2.0])
    u = prop.controls(None, x)
    assert np.allclose(u[:, 0], 0.3 * x)
    assert prop.check_values(u, x)
    assert np.allclose(prop.dtheta(None, x)[:, 0, 0], x)


def test_perturbation_must_stay_inside_the_box(poisson16):
    sde, _ = quadratic_toy()
    st_ = simulate_state(poisson16, sde, toy_policy(1.9))
    with pytest.raises(ValueError, match="control set"):
        variation_process(st_, np.full((st_.n_paths, 16), 0.5))


def test_simulate_state_arguments(poisson16):
    sde, _ = quadratic_toy()
    with pytest.raises(ValueError):
        simulate_state(poisson16, sde)
    with pytest.raises(ValueError):
        simulate_state(poisson16, sde, toy_policy(), np.zeros((poisson16.n_paths, 16)))
    frozen = simulate_state(poisson16, sde, controls=np.full((poisson16.n_paths, 16), 0.7))
    fed = simulate_state(poisson16, sde, toy_policy(0.7))
    assert np.array_equal(frozen.X, fed.X)


def test_blow_up_is_reported(brownian16):
    sde = ControlledSDESpec(1.0, 1, 1,
                            drift=lambda ctx, u, x: 1e300 * x,
                            jump=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                            drift_x=lambda ctx, u, x: np.full(x.shape[0], 1e300),
                            drift_u=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                            jump_x=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
                            jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)), validate=False)
    with pytest.raises(FloatingPointError):
        simulate_state(brownian16, sde, ConstantPolicy([0.0], [-1], [1]))

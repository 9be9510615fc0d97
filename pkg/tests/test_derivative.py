import numpy as np
import pytest

from smpjump.derivative import (TargetVariable, default_basis, duality_gap, estimate_anchor_field,
                                estimate_derivative, representation_residual)
from smpjump.dissecting import build_dissecting_system
from smpjump.oracles import binomial_tree, poisson_conditional, tree_conditional
from smpjump.regression import RegressionBasis


@pytest.fixture(scope="module")
def tree():
    return binomial_tree(10)


def test_tree_oracle_matches_closed_form(tree):
    w = tree.running_noise_tm
    xi = tree.terminal_noise() ** 2
    for start, stop in ((0, 10), (3, 5), (7, 8)):
        exact = 2.0 * w[start][:, 0]
        assert np.allclose(tree_conditional(tree, xi, start, stop), exact, atol=1e-12)


def test_poisson_oracle_matches_closed_form():
    lam, T, ta, tb = 2.0, 1.0, 0.25, 0.5
    h = np.arange(5)
    first = poisson_conditional(lambda c: c.astype(float), lam, T, ta, tb, h)
    assert np.allclose(first, 1.0, atol=1e-10)
    second = poisson_conditional(lambda c: c.astype(float) ** 2, lam, T, ta, tb, h)
    assert np.allclose(second, 2 * h + 2 * lam * (T - ta) + 1, atol=1e-9)


def test_estimate_recovers_tree_derivative(tree):
    system = build_dissecting_system(tree.grid, tree.marks, 1)
    xi = tree.terminal_noise() ** 2
    fld = estimate_derivative(tree, xi, system, 1, RegressionBasis(("noise",), 2))
    for j, c in enumerate(fld.cells):
        exact = tree_conditional(tree, xi, c.start, c.stop)
        assert np.allclose(fld.cell_values[j], exact, atol=1e-7)


def test_field_is_linear_under_power_of_two_scaling(poisson16):
    system = build_dissecting_system(poisson16.grid, poisson16.marks, 2)
    h = poisson16.terminal_noise()
    a = estimate_derivative(poisson16, h ** 2, system, 2)
    b = estimate_derivative(poisson16, 4.0 * h ** 2, system, 2)
    c = estimate_derivative(poisson16, -h ** 2, system, 2)
    assert np.array_equal(b.cell_values, 4.0 * a.cell_values)
    assert np.array_equal(c.cell_values, -a.cell_values)
    s = estimate_derivative(poisson16, h ** 2 + h, system, 2)
    d = estimate_derivative(poisson16, h, system, 2)
    assert np.allclose(s.cell_values, a.cell_values + d.cell_values, rtol=1e-12, atol=1e-12)


def test_recompute_is_exact_and_values_are_predictable(poisson16):
    system = build_dissecting_system(poisson16.grid, poisson16.marks, 3)
    fld = estimate_derivative(poisson16, poisson16.terminal_noise() ** 2, system, 3)
    assert np.array_equal(fld.recompute(), fld.cell_values)
    assert fld.single_ensemble
    grid = fld.grid_values()
    assert grid.shape == (poisson16.n_paths, 16, 1)


def test_duality_and_representation(poisson16, brownian16):
    for e in (poisson16, brownian16):
        system = build_dissecting_system(e.grid, e.marks, 3)
        xi = e.terminal_noise() ** 2
        fld = estimate_derivative(e, xi, system, 3)
        assert duality_gap(e, xi, 1.0, fld).passed()
        rep = representation_residual(e, xi, fld)
        assert np.max(np.abs(rep.orthogonality_zscores)) < 5
        coarse = representation_residual(e, xi, estimate_derivative(e, xi, system, 1))
        assert rep.residual_variance < coarse.residual_variance
    # Brownian W_T^2 residual is sum over cells of (dW^2 - dt): variance 2 T^2 2^-n
    for level in (1, 3):
        e = brownian16
        system = build_dissecting_system(e.grid, e.marks, 3)
        xi = e.terminal_noise() ** 2
        rep = representation_residual(e, xi, estimate_derivative(e, xi, system, level))
        assert rep.residual_variance == pytest.approx(2.0 / 2 ** level, rel=0.1)


def test_anchor_field_matches_partition_field_on_aligned_cells(poisson16):
    e = poisson16
    xi = e.terminal_noise()
    basis = default_basis(e)
    anchor = estimate_anchor_field(e, np.tile(xi, (16, 1)), 4, basis)
    system = build_dissecting_system(e.grid, e.marks, 2)
    part = estimate_derivative(e, xi, system, 2, basis)
    for j, c in enumerate(part.cells):
        assert np.array_equal(anchor.cell_values[c.start], part.cell_values[j])


def test_target_validation(poisson16):
    with pytest.raises(ValueError):
        TargetVariable(np.array([1.0, np.inf]))
    with pytest.raises(ValueError):
        TargetVariable(np.zeros((2, 2)))
    system = build_dissecting_system(poisson16.grid, poisson16.marks, 1)
    with pytest.raises(ValueError):
        estimate_derivative(poisson16, np.zeros(3), system, 1)

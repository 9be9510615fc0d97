"""Adjoint quantities K, DK, F, p and kappa along simulated paths.

Derivative fields are estimated only on the diagonal: for anchor step k the
cell (t_k, t_k + T 2**-level] per mark.  When ``fit_states`` is supplied the
regressions are fitted on that independent ensemble and evaluated on the
primary one; otherwise the fit is in-sample and flagged as such.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .derivative import DualityRecord, estimate_anchor_field, stochastic_intensity
from .noise import MeanEstimate
from .regression import FeatureContext, RegressionBasis


class AdmissibilityError(ValueError):
    pass


def second_moment_proxy(values, name, ratio_bound=3.0):
    """Second moment on the full sample and on its first half."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim > 1:
        v = v.reshape(v.shape[0], -1).sum(axis=1)
    finite = bool(np.all(np.isfinite(v)))
    full = float(np.mean(v ** 2)) if finite else float("inf")
    half = float(np.mean(v[: max(1, v.size // 2)] ** 2)) if finite else float("inf")
    if full == 0.0 and half == 0.0:
        ratio = 1.0
    elif finite and min(full, half) > 0:
        ratio = full / half
    else:
        ratio = float("inf")
    stable = finite and 1.0 / ratio_bound <= ratio <= ratio_bound
    return {"name": name, "second_moment": full, "half_sample": half, "finite": finite, "stable": bool(stable)}


def require_admissible(proxies):
    bad = [p["name"] for p in proxies if not (p["finite"] and p["stable"])]
    if bad:
        raise AdmissibilityError(f"integrability proxies failed: {bad}")


def default_adjoint_basis(states):
    e = states.ensemble
    feats = ["state"]
    if e.counts is not None:
        feats.append("alive")
    else:
        feats.append("noise")
    if stochastic_intensity(e):
        feats.append("intensity")
    return RegressionBasis(tuple(feats), 2)


def adjoint_K(states, cost):
    """K_k = g'(X_T) + sum_{s >= k} f_x(s) dt for k = 0..K, time-major (K+1, n)."""
    K = states.u_tm.shape[0]
    out = np.empty((K + 1, states.n_paths))
    out[K] = cost.terminal_x(states.X_tm[K])
    dt = states.ensemble.dt
    for k in range(K - 1, -1, -1):
        ctx = states.context(k)
        out[k] = out[k + 1] + cost.running_x(ctx, states.u_tm[k], states.X_tm[k]) * dt
    return out


def _running_x_sq(states, cost):
    dt = states.ensemble.dt
    total = np.zeros(states.n_paths)
    for k in range(states.u_tm.shape[0]):
        fx = cost.running_x(states.context(k), states.u_tm[k], states.X_tm[k])
        total += fx ** 2 * dt
    return total


def _width(states, level):
    K = states.ensemble.n_steps
    if level < 0 or K % (2 ** level):
        raise ValueError(f"level {level} does not divide the {K}-step grid dyadically")
    return K >> level


def compute_K(states, cost, level, basis=None, fit_states=None, with_cov=True):
    """K per path and anchor, plus the diagonal field of DK.

    Returns (K, DK field evaluated on ``states``, proxies).
    """
    basis = basis or default_adjoint_basis(states)
    K_eval = adjoint_K(states, cost)
    proxies = [second_moment_proxy(cost.terminal_x(states.X_tm[-1]), "g_x(X_T)"),
               second_moment_proxy(_running_x_sq(states, cost), "int f_x^2 dt")]
    require_admissible(proxies)
    fit = fit_states or states
    K_fit = K_eval if fit is states else adjoint_K(fit, cost)
    dk = estimate_anchor_field(fit.ensemble, K_fit, _width(states, level), basis, states=fit,
                               eval_context=FeatureContext(states.ensemble, states),
                               with_cov=with_cov, label="DK")
    return K_eval, dk, proxies


def compute_F(states, K, dk_grid):
    """F_k = K_k b_x + sum_z DK_k(z) phi_x(z) lambda_k(z), time-major (K, n).

    ``K`` is time-major (K+1, n) and ``dk_grid`` time-major (K, n, m).
    """
    steps = states.u_tm.shape[0]
    F = np.zeros((steps, states.n_paths))
    for k in range(steps):
        d = states.partials(k)
        F[k] = K[k] * d["b_x"] + np.sum(dk_grid[k] * d["phi_x"] * d["ctx"].intensity, axis=1)
    return F


def state_derivatives_vanish(states):
    for k in range(states.u_tm.shape[0]):
        d = states.partials(k)
        if np.any(d["b_x"] != 0) or np.any(d["phi_x"] != 0):
            return False
    return True


def adjoint_p(states, K, F):
    """p_k = K_k + sum_{s >= k} F_s G_s(k) dt by backward recursion, (K+1, n).

    R_k = F_k dt + m_k R_{k+1} with m_k the one-step factor of G, so exact
    zeros in G need no division.  ``K`` and ``F`` are time-major.
    """
    steps = states.u_tm.shape[0]
    dt = states.ensemble.dt
    p = np.empty((steps + 1, states.n_paths))
    R = np.zeros(states.n_paths)
    p[steps] = K[steps]
    for k in range(steps - 1, -1, -1):
        R = F[k] * dt + states.multiplier(k) * R
        p[k] = K[k] + R
    return p


@dataclass(eq=False)
class AdjointBundle:
    """Adjoints on one ensemble; arrays are time-major with path-major views."""

    level: int
    K_tm: np.ndarray
    DK: object
    F_tm: np.ndarray
    p_tm: np.ndarray
    kappa: object
    single_ensemble: bool
    proxies: list = field(default_factory=list)

    @property
    def K(self):
        return self.K_tm.T

    @property
    def F(self):
        return self.F_tm.T

    @property
    def p(self):
        return self.p_tm.T

    @cached_property
    def kappa_grid_tm(self):
        return self.kappa.grid_values_tm()

    @property
    def kappa_grid(self):
        return np.moveaxis(self.kappa_grid_tm, 0, 1)

    @cached_property
    def DK_grid_tm(self):
        return self.DK.grid_values_tm()

    @property
    def DK_grid(self):
        return np.moveaxis(self.DK_grid_tm, 0, 1)

    def export_anchor_rows(self, grid, marks):
        edges = grid.edges
        for j, (c, k) in enumerate(zip(self.kappa.cells, self.kappa.anchors)):
            fit = self.kappa.fits[j]
            coef = [] if fit is None else list(np.ravel(fit.coef))
            yield [edges[k], marks.labels[c.marks[0]]] + coef

    def export_path_rows(self, grid, max_paths=100):
        edges = grid.edges
        n = min(max_paths, self.K_tm.shape[1])
        for i in range(n):
            for k in range(self.F_tm.shape[0]):
                yield [i, edges[k], self.K_tm[k, i], self.F_tm[k, i], self.p_tm[k, i]]


def compute_p_kappa(states, K, F, level, basis=None, fit_states=None, fit_p=None, with_cov=True):
    """p per path and anchor and the diagonal field of kappa = D p."""
    basis = basis or default_adjoint_basis(states)
    p = adjoint_p(states, K, F)
    if fit_states is None:
        fit_states, fit_p = states, p
    elif fit_p is None:
        raise ValueError("fit_p is required with fit_states")
    kappa = estimate_anchor_field(fit_states.ensemble, fit_p, _width(states, level), basis,
                                  states=fit_states, eval_context=FeatureContext(states.ensemble, states),
                                  with_cov=with_cov, label="kappa")
    return p, kappa


def compute_adjoints(states, cost, level, basis=None, fit_states=None, with_cov=True):
    """Full adjoint pipeline; two-ensemble when ``fit_states`` is given."""
    basis = basis or default_adjoint_basis(states)
    K, dk, proxies = compute_K(states, cost, level, basis, fit_states, with_cov)
    if state_derivatives_vanish(states) and (fit_states is None or state_derivatives_vanish(fit_states)):
        F = np.zeros((states.u_tm.shape[0], states.n_paths))
        p = adjoint_p(states, K, F)
        kappa = dk
    else:
        F = compute_F(states, K, dk.grid_values_tm())
        fit_p = None
        if fit_states is not None:
            K_fit = adjoint_K(fit_states, cost)
            dk_fit = dk.evaluate(FeatureContext(fit_states.ensemble, fit_states))
            fit_p = adjoint_p(fit_states, K_fit, compute_F(fit_states, K_fit, dk_fit.grid_values_tm()))
        p, kappa = compute_p_kappa(states, K, F, level, basis, fit_states, fit_p, with_cov)
    proxies.append(second_moment_proxy(F.T, "F"))
    return AdjointBundle(level, K, dk, F, p, kappa, fit_states is None, proxies)


def anchor_duality(states, targets_tm, fld, anchor, mark=0):
    """Duality check for one anchor cell of a diagonal field.

    Compares E[xi_k mu(cell)] with E[field(cell) Lambda(cell)] where xi_k is
    the anchor-k target and the cell is the field's cell at that anchor.
    """
    e = states.ensemble
    j = anchor * e.n_marks + mark
    cell = fld.cells[j]
    mu, comp = e.cell_increment(cell), e.cell_compensator(cell)
    lhs_i = np.asarray(targets_tm)[anchor] * mu
    rhs_i = fld.cell_values[j] * comp
    fit_var = 0.0 if fld.single_ensemble else fld.fit_variance(j, comp)
    diff = MeanEstimate.of(lhs_i - rhs_i)
    lhs, rhs = MeanEstimate.of(lhs_i), MeanEstimate.of(rhs_i)
    return DualityRecord(lhs.value, rhs.value, lhs.value - rhs.value, lhs.std_error,
                         float(np.sqrt(rhs.std_error ** 2 + fit_var)),
                         float(np.sqrt(diff.std_error ** 2 + fit_var)), fld.single_ensemble)

"""Hamiltonian gradient, conditional projection, criticality and optimization."""

from dataclasses import dataclass, field

import numpy as np

from .adjoint import (AdjointBundle, adjoint_K, adjoint_p, compute_adjoints, compute_F,
                      require_admissible, second_moment_proxy)
from .derivative import stochastic_intensity
from .noise import MeanEstimate
from .regression import FeatureContext, RegressionBasis, fit_design
from .state import gateaux_samples, performance, simulate_state


@dataclass(eq=False)
class ProjectedField:
    """Per-step regression fits of a field on F_t features, with fitted values.

    ``values_tm`` is time-major (K, n, c); ``values`` is the path-major view.
    """

    values_tm: np.ndarray
    fits: list
    basis: RegressionBasis
    context: FeatureContext

    @property
    def values(self):
        return np.moveaxis(self.values_tm, 0, 1)


@dataclass(eq=False)
class HamiltonianGradientField:
    """dH/du per step and path; ``raw_tm`` is time-major (K, n, c)."""

    raw_tm: np.ndarray
    projected: ProjectedField = None

    @property
    def raw(self):
        return np.moveaxis(self.raw_tm, 0, 1)

    @property
    def dt(self):
        return self.projected.context.ensemble.dt

    def step_norms(self, projected=True):
        vals = self.projected.values_tm if projected else self.raw_tm
        return np.mean(np.sum(vals ** 2, axis=2), axis=1)


def hamiltonian_gradient(states, cost, bundle):
    """dH/du = f_u + b_u p_t + sum_z kappa_t(z) phi_u(z) lambda_t(z)."""
    steps, n, c = states.u_tm.shape
    if bundle.p_tm.shape[0] < steps + 1 or bundle.kappa_grid_tm.shape[0] != steps:
        raise ValueError("adjoint bundle does not cover every step")
    kap = bundle.kappa_grid_tm
    out = np.empty((steps, n, c))
    for k in range(steps):
        d = states.partials(k)
        ctx = d["ctx"]
        u, x = states.u_tm[k], states.X_tm[k]
        out[k] = (cost.running_u(ctx, u, x) + d["b_u"] * bundle.p_tm[k][:, None]
                  + np.einsum("iz,izc->ic", kap[k] * ctx.intensity, d["phi_u"]))
    return HamiltonianGradientField(out)


def projection_basis(states, degree=2):
    e = states.ensemble
    feats = ["state"]
    feats.append("alive" if e.counts is not None else "noise")
    if stochastic_intensity(e):
        feats.append("intensity")
    return RegressionBasis(tuple(feats), degree)


def projection_context(states):
    obs = states.policy.observables if states.policy is not None else None
    if obs is None:
        return FeatureContext(states.ensemble, states)
    return FeatureContext(states.ensemble, states, obs)


def conditional_projection(values, basis, context, with_cov=False):
    """Per-step ridge regression of path-major ``values`` (n, K, c) on F_t features.

    A ProjectedField on the same basis and context already lies in the range
    of the projection and is returned unchanged.
    """
    if isinstance(values, ProjectedField):
        if values.basis == basis and values.context is context:
            return values
        return project_time_major(values.values_tm, basis, context, with_cov)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    return project_time_major(np.moveaxis(values, 1, 0), basis, context, with_cov)


def project_time_major(values_tm, basis, context, with_cov=False):
    """Projection of a time-major (K, n, c) field."""
    steps = values_tm.shape[0]
    out = np.empty(values_tm.shape)
    fits = []
    for k in range(steps):
        design = basis.design(context, k)
        fit = fit_design(design, values_tm[k].T, with_cov=with_cov)
        out[k] = fit.predict(design).T
        fits.append(fit)
    return ProjectedField(out, fits, basis, context)


def project_gradient(gradient, basis, context):
    gradient.projected = project_time_major(gradient.raw_tm, basis, context)
    return gradient


@dataclass(frozen=True)
class CriticalityScore:
    score: float
    std_error: float
    profile: np.ndarray


def criticality_score(gradient):
    """Mean over paths of sum_t |projected gradient|^2 dt, with its profile."""
    if gradient.projected is None:
        raise ValueError("gradient has not been projected")
    vals = gradient.projected.values_tm
    dt = gradient.dt
    per_path = np.sum(vals ** 2, axis=(0, 2)) * dt
    est = MeanEstimate.of(per_path)
    return CriticalityScore(est.value, est.std_error, gradient.step_norms())


def policy_gradient(states, gradient):
    """E[sum_t projected dH/du . du/dtheta dt], shape (n_params,)."""
    pol = states.policy
    vals = gradient.projected.values_tm
    total = np.zeros(pol.n_params)
    n = vals.shape[1]
    for k in range(vals.shape[0]):
        ctx = states.context(k)
        dth = pol.dtheta(ctx, states.X_tm[k])
        total += np.einsum("ic,icp->p", vals[k], dth) / n
    return total * states.ensemble.dt


# -- optimization ----------------------------------------------------------------

@dataclass
class OptimizerConfig:
    max_iter: int = 50
    step0: float = 0.1
    decay: float = 50.0
    refit_period: int = 5
    tolerance: float = None
    theta_tolerance: float = None
    level: int = None
    basis: RegressionBasis = None
    projection_degree: int = 2

    def step(self, m):
        return self.step0 / (1.0 + m / self.decay)


@dataclass
class TraceEntry:
    iteration: int
    theta: list
    J: float
    J_se: float
    score: float
    step: float
    gradient: list


@dataclass
class OptimizationTrace:
    entries: list = field(default_factory=list)
    termination: str = ""

    def thetas(self):
        return np.array([e.theta for e in self.entries])

    def rows(self):
        for e in self.entries:
            yield [e.iteration] + list(e.theta) + [e.J, e.score, e.step]


def evaluate_policy(ensemble, sde, cost, policy, level, basis=None, fit_ensemble=None,
                    projection_degree=2, stale=None):
    """States, adjoints, projected gradient and parameter gradient for a policy.

    ``stale`` reuses the adjoint fields of an earlier evaluation, re-evaluated
    on the new states, instead of refitting them.
    """
    states = simulate_state(ensemble, sde, policy)
    fit_states = simulate_state(fit_ensemble, sde, policy) if fit_ensemble is not None else None
    if stale is None:
        bundle = compute_adjoints(states, cost, level, basis, fit_states, with_cov=False)
    else:
        bundle = _refresh_bundle(stale, states, cost)
    grad = hamiltonian_gradient(states, cost, bundle)
    project_gradient(grad, projection_basis(states, projection_degree), projection_context(states))
    return states, bundle, grad, policy_gradient(states, grad)


def _refresh_bundle(bundle, states, cost):
    ctx = FeatureContext(states.ensemble, states)
    K = adjoint_K(states, cost)
    dk = bundle.DK.evaluate(ctx)
    kappa = dk if bundle.kappa is bundle.DK else bundle.kappa.evaluate(ctx)
    if np.any(bundle.F_tm):
        F = compute_F(states, K, dk.grid_values_tm())
    else:
        F = np.zeros_like(bundle.F_tm)
    return AdjointBundle(bundle.level, K, dk, F, adjoint_p(states, K, F), kappa,
                         bundle.single_ensemble, list(bundle.proxies))


def optimize_policy(ensemble, sde, cost, policy, config, fit_ensemble=None):
    """Projected gradient ascent on the policy parameters (common random numbers)."""
    level = config.level if config.level is not None else int(np.log2(ensemble.n_steps))
    trace = OptimizationTrace()
    theta = policy.theta.copy()
    bundle = None
    for m in range(config.max_iter):
        pol = policy.with_theta(theta)
        refit = bundle is None or config.refit_period <= 1 or m % config.refit_period == 0
        states, new_bundle, grad, g = evaluate_policy(
            ensemble, sde, cost, pol, level, config.basis, fit_ensemble,
            config.projection_degree, stale=None if refit else bundle)
        bundle = new_bundle
        require_admissible([second_moment_proxy(cost.terminal(states.X_tm[-1]), "g(X_T)")] + bundle.proxies)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at iteration {m}")
        J = performance(states, cost)
        score = criticality_score(grad)
        gamma = config.step(m)
        trace.entries.append(TraceEntry(m, [float(v) for v in theta], J.value, J.std_error,
                                        score.score, gamma, [float(v) for v in g]))
        if config.tolerance is not None and score.score < config.tolerance:
            trace.termination = "criticality below tolerance"
            return policy.with_theta(theta), trace
        new = policy.project(theta + gamma * g)
        if config.theta_tolerance is not None and np.max(np.abs(new - theta)) < config.theta_tolerance:
            trace.termination = "parameter change below tolerance"
            return policy.with_theta(new), trace
        theta = new
    trace.termination = "max_iter"
    return policy.with_theta(theta), trace


# -- consistency of the gradient with Gateaux derivatives -------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyRecord:
    anchor: int
    width: int
    gateaux: float
    predicted: float
    difference: float
    std_error: float

    def passed(self, n_se=4.0):
        floor = 64 * np.finfo(float).eps * (abs(self.gateaux) + abs(self.predicted))
        return abs(self.difference) <= n_se * self.std_error + floor


def simple_perturbation(states, alpha, anchor, width):
    """beta_s = alpha * 1_(t_anchor, t_anchor + width dt](s), shape (n, K, c)."""
    n, steps, c = states.u.shape
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    beta = np.zeros((n, steps, c))
    beta[:, anchor:anchor + width, :] = alpha[:, None, :]
    return beta


def theorem_consistency(states, cost, gradient, bundle, alpha, anchor, width):
    """Gateaux derivative along a simple perturbation vs E[alpha . proj dH/du] h."""
    dt = states.ensemble.dt
    h = width * dt
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    beta = simple_perturbation(states, alpha, anchor, width)
    lhs_i = gateaux_samples(states, cost, beta)
    rhs_i = np.einsum("ic,ic->i", alpha, gradient.projected.values_tm[anchor]) * h
    diff = MeanEstimate.of(lhs_i - rhs_i)
    var = diff.std_error ** 2
    kap = bundle.kappa
    if not kap.single_ensemble:
        d = states.partials(anchor)
        m = states.ensemble.n_marks
        for z in range(m):
            w = np.einsum("ic,ic->i", alpha, d["phi_u"][:, z, :]) * d["ctx"].intensity[:, z] * h
            var += kap.fit_variance(anchor * m + z, w)
    return ConsistencyRecord(anchor, width, float(lhs_i.mean()), float(rhs_i.mean()),
                             float(lhs_i.mean() - rhs_i.mean()), float(np.sqrt(var)))

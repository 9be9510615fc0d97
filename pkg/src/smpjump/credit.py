"""Portfolio of defaultable assets driven by doubly stochastic Poisson noise.

Wealth follows dX = sum_z 1{tau_z > t} u_z (rho_z dt - dHtilde_z), where an
asset becomes worthless at its first jump.  Controls are amounts u = pi X
parameterized by proportions pi in the open box (0, 1)^n.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adjoint import second_moment_proxy
from .maxprinciple import project_time_major, projection_basis, projection_context
from .regression import predictive_variance
from .noise import DoublyStochasticPoisson, IntensityDriver, MarkSpace, MeanEstimate
from .state import ControlledSDESpec, CostSpec, ProportionalPolicy, simulate_state


MAX_DISTINCT_RETURNS = 256


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Utility:
    name: str
    value: Callable
    first: Callable
    second: Callable

    @classmethod
    def log(cls):
        return cls("log", _log_value, lambda x: 1.0 / _positive(x), lambda x: -1.0 / _positive(x) ** 2)

    @classmethod
    def power(cls, gamma):
        if not 0 < gamma < 1:
            raise ValueError("power utility needs gamma in (0, 1)")
        return cls(f"power({gamma})", lambda x: _positive(x) ** gamma / gamma,
                   lambda x: _positive(x) ** (gamma - 1.0),
                   lambda x: (gamma - 1.0) * _positive(x) ** (gamma - 2.0))

    def probe(self, points=(0.25, 0.5, 1.0, 2.0, 4.0)):
        x = np.asarray(points, dtype=np.float64)
        if not (np.all(self.first(x) > 0) and np.all(self.second(x) < 0)):
            raise ValueError(f"utility {self.name} must be increasing and strictly concave")
        h = 1e-6 * x
        for f, df in ((self.value, self.first), (self.first, self.second)):
            fd = (f(x + h) - f(x - h)) / (2 * h)
            if np.max(np.abs(fd - df(x)) / np.maximum(1.0, np.abs(df(x)))) > 1e-6:
                raise ValueError(f"utility {self.name} derivatives disagree with finite differences")


def _positive(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        bad = int(np.flatnonzero(np.ravel(x) <= 0)[0])
        raise DomainError(f"non-positive wealth on path {bad}")
    return x


def _log_value(x):
    return np.log(_positive(x))


@dataclass(frozen=True)
class CreditMarketSpec:
    """``rho`` entries are floats or callables of t; ``intensity`` entries are
    floats (constant) or IntensityDriver instances."""

    rho: tuple = (0.05,)
    intensity: tuple = (0.02,)
    x0: float = 1.0
    utility: Utility = field(default_factory=Utility.log)

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(np.atleast_1d(self.rho)) if not callable(self.rho) else (self.rho,))
        object.__setattr__(self, "intensity", tuple(self.intensity) if isinstance(self.intensity, (tuple, list)) else (self.intensity,))
        if len(self.rho) != len(self.intensity):
            raise ValueError("one excess return and one intensity per asset are required")
        if not self.x0 > 0:
            raise ValueError("initial wealth must be positive")
        for r in self.rho:
            vals = np.atleast_1d(r(np.linspace(0.0, 1e3, 11)) if callable(r) else r)
            if not np.all(np.isfinite(vals)):
                raise ValueError("excess returns must be bounded")
        self.utility.probe()

    @property
    def n_assets(self):
        return len(self.rho)

    def rho_at(self, t):
        return np.array([r(t) if callable(r) else float(r) for r in self.rho])

    def drivers(self):
        return tuple(v if isinstance(v, IntensityDriver) else IntensityDriver(float(v), float(v))
                     for v in self.intensity)


@dataclass(frozen=True)
class CreditMarket:
    spec: CreditMarketSpec
    noise: DoublyStochasticPoisson
    marks: MarkSpace
    sde: ControlledSDESpec
    cost: CostSpec


def build_credit_market(spec):
    n = spec.n_assets
    rho_at = spec.rho_at

    def drift(ctx, u, x):
        return np.einsum("iz,iz,z->i", ctx.alive, u, rho_at(ctx.t))

    def jump(ctx, u, x):
        return -ctx.alive * u

    def drift_u(ctx, u, x):
        return ctx.alive * rho_at(ctx.t)[None, :]

    def jump_u(ctx, u, x):
        return -ctx.alive[:, :, None] * np.eye(n)[None, :, :]

    zeros = lambda ctx, u, x: np.zeros(x.shape[0])
    zeros_m = lambda ctx, u, x: np.zeros((x.shape[0], n))
    sde = ControlledSDESpec(spec.x0, n, n, drift, jump, zeros, drift_u, zeros_m, jump_u,
                            jump_cap=1, name="credit-wealth")
    U = spec.utility
    cost = CostSpec.terminal_only(U.value, U.first, name=f"U={U.name}")
    return CreditMarket(spec, DoublyStochasticPoisson(spec.drivers()), MarkSpace.numbered(n), sde, cost)


def analytic_log_optimum(rho, lam):
    """Maximizer of pi (rho + lam) + lam log(1 - pi) over [0, 1)."""
    if lam <= 0:
        raise ValueError("intensity must be positive")
    if rho < 0:
        raise ValueError("excess return must be non-negative")
    return rho / (rho + lam)


def proportion_policy(market, pi, margin=None):
    n = market.spec.n_assets
    return ProportionalPolicy(np.broadcast_to(np.asarray(pi, dtype=np.float64), (n,)),
                              np.zeros(n), np.ones(n), margin=margin)


def default_state(ensemble):
    """First jump step per path and asset, -1 while alive."""
    if ensemble.counts is None:
        raise ValueError("default times need a counting noise")
    hit = ensemble.counts_tm > 0
    first = np.argmax(hit, axis=0)
    return np.where(hit.any(axis=0), first, -1)


@dataclass(frozen=True)
class PerformanceRecord:
    J: float
    std_error: float
    proxies: list


def estimate_performance(ensemble, market, policy=None, controls=None):
    """Mean utility of terminal wealth under a policy or frozen controls."""
    states = simulate_state(ensemble, market.sde, policy, controls)
    xt = states.X_tm[-1]
    if np.any(xt <= 0):
        raise DomainError(f"non-positive terminal wealth on path {int(np.flatnonzero(xt <= 0)[0])}")
    values = market.cost.terminal(xt)
    est = MeanEstimate.of(values)
    proxies = [second_moment_proxy(values, "U(X_T)"),
               second_moment_proxy(market.spec.utility.first(xt), "U'(X_T)")]
    return PerformanceRecord(est.value, est.std_error, proxies)


@dataclass(frozen=True)
class CorollaryRecord:
    profile: np.ndarray
    aggregate: float
    std_error: float
    l2: float

    def zscore(self):
        return self.aggregate / self.std_error if self.std_error > 0 else 0.0


def corollary_residual(states, market, bundle):
    """Residual 1{tau>t} rho E[U'(X_T)|F_t] + phi_u D U'(X_T) lambda per step and asset.

    The aggregate is the path mean of sum_t sum_z residual dt.  Its standard
    error combines path variation, the coefficient noise of the kappa fits,
    and the coefficient noise of the projections (summed over steps, which
    bounds their correlation from above).
    """
    if bundle is None or bundle.kappa is None:
        raise ValueError("corollary residual needs computed adjoints")
    e = states.ensemble
    steps, n, m = states.u_tm.shape
    dt = e.dt
    basis = projection_basis(states)
    ctx = projection_context(states)
    proj = project_time_major(bundle.p_tm[:steps, :, None], basis, ctx, with_cov=True)
    kap = bundle.kappa_grid_tm
    profile = np.zeros((steps, m))
    per_path = np.zeros(n)
    l2 = np.zeros(n)
    fit_var = 0.0
    proj_sd = 0.0
    for k in range(steps):
        d = states.partials(k)
        alive = d["ctx"].alive
        lam = d["ctx"].intensity
        rho = market.spec.rho_at(e.grid.time(k))
        sign = np.einsum("izz->iz", d["phi_u"])
        resid = alive * rho[None, :] * proj.values_tm[k] + sign * kap[k] * lam
        profile[k] = resid.mean(axis=0)
        per_path += resid.sum(axis=1) * dt
        l2 += np.sum(resid ** 2, axis=1) * dt
        design = basis.design(ctx, k)
        w = (alive * rho[None, :]).sum(axis=1) * dt
        proj_sd += np.sqrt(predictive_variance(proj.fits[k], design, w, response=0))
        if not bundle.kappa.single_ensemble:
            for z in range(m):
                fit_var += bundle.kappa.fit_variance(k * m + z, sign[:, z] * lam[:, z] * dt)
    est = MeanEstimate.of(per_path)
    se = float(np.sqrt(est.std_error ** 2 + fit_var + proj_sd ** 2))
    return CorollaryRecord(profile, est.value, se, float(l2.mean()))


# -- proportional-policy grids ----------------------------------------------------

def step_returns(ensemble, market):
    """Per-step return of one unit invested in each asset, time-major (K, n, m).

    Under u = pi X the wealth recursion is X_{k+1} = X_k (1 + sum_z pi_z a_kz)
    with a = 1{alive} (rho dt - capped increment).
    """
    sde = market.sde
    K = ensemble.n_steps
    out = np.empty((K, ensemble.n_paths, ensemble.n_marks))
    rc = ensemble.running_counts_tm
    for k in range(K):
        alive = (rc[k] == 0)
        rho = market.spec.rho_at(ensemble.grid.time(k))
        out[k] = alive * (rho[None, :] * ensemble.dt - sde.noise(ensemble, k))
    return out


@dataclass(frozen=True)
class GridPoint:
    pi: tuple
    J: float
    std_error: float


def proportion_grid(ensemble, market, pis):
    """Expected utility for each constant proportion vector in ``pis``.

    Uses the product form of the wealth recursion, compressed over the
    distinct per-step returns; agrees with ``simulate_state`` up to rounding.
    Returns (grid points, per-path utilities of shape (len(pis), n)).
    """
    a = step_returns(ensemble, market)
    K, n, m = a.shape
    pis = np.asarray(pis, dtype=np.float64).reshape(len(pis), -1)
    pis = np.broadcast_to(pis, (pis.shape[0], m))
    if m == 1:
        rows, inverse = np.unique(a.ravel(), return_inverse=True)
        rows = rows[:, None]
    else:
        rows, inverse = np.unique(a.reshape(K * n, m), axis=0, return_inverse=True)
    nu = rows.shape[0]
    counts = None
    if nu <= MAX_DISTINCT_RETURNS:
        cell = np.tile(np.arange(n) * nu, K) + inverse.ravel()
        counts = np.bincount(cell, minlength=n * nu).reshape(n, nu).astype(np.float64)
    U = market.spec.utility
    values = np.empty((pis.shape[0], n))
    points = []
    for j, pi in enumerate(pis):
        factor = 1.0 + rows @ pi
        if np.any(factor <= 0):
            raise DomainError(f"proportion {pi.tolist()} makes wealth non-positive")
        if counts is not None:
            log_x = counts @ np.log(factor)
        else:
            log_x = np.log(1.0 + a @ pi).sum(axis=0)
        log_x += np.log(market.spec.x0)
        values[j] = U.value(np.exp(log_x))
        est = MeanEstimate.of(values[j])
        points.append(GridPoint(tuple(float(v) for v in pi), est.value, est.std_error))
    return points, values

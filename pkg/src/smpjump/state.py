"""Controlled jump SDE: Euler paths, first variation, variation process.

Coefficient callbacks are vectorized over paths and receive
``(ctx, u, x)`` where ``ctx`` is a ``StepContext`` (step index, time, current
intensity, running noise and counts, survival indicators, and user extras),
``u`` has shape (n, n_controls) and ``x`` has shape (n,).  Expected output
shapes: drift (n,), jump (n, m), drift_x (n,), drift_u (n, c), jump_x (n, m),
jump_u (n, m, c).
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .noise import MeanEstimate
from .regression import FULL_INFORMATION, Observables

FD_TOLERANCE = 1e-6


@dataclass
class StepContext:
    k: int
    t: float
    dt: float
    intensity: np.ndarray
    running_noise: np.ndarray
    running_counts: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.intensity.shape[0]

    @property
    def alive(self):
        """1 for marks whose counting process has not jumped before t_k."""
        if self.running_counts is None:
            return np.ones_like(self.intensity)
        return (self.running_counts == 0).astype(np.float64)


def _extras_tm(extras):
    """Path-major extras (n, K...) stored step-major for cheap per-step access."""
    return {name: np.ascontiguousarray(np.moveaxis(np.asarray(arr), 1, 0))
            for name, arr in (extras or {}).items()}


def step_context(ensemble, k, extras_tm=None):
    lam = np.asarray(ensemble.intensity_tm[min(k, ensemble.n_steps - 1)], dtype=np.float64)
    rc = ensemble.running_counts_tm
    counts = None if rc is None else rc[k]
    ex = {name: arr[k] for name, arr in (extras_tm or {}).items()}
    return StepContext(k, ensemble.grid.time(k), ensemble.dt, lam,
                       ensemble.running_noise_tm[k], counts, ex)


@dataclass(frozen=True)
class ControlledSDESpec:
    """dX = b(t,u,X)dt + sum_z phi(t,z,u,X) mu(dt,z), X_0 = x0.

    ``jump_cap`` optionally caps the per-step count seen by the state, so the
    state is driven by min(N, cap) - Lambda; it only applies to counting noise.
    """

    x0: float
    n_controls: int
    n_marks: int
    drift: Callable
    jump: Callable
    drift_x: Callable
    drift_u: Callable
    jump_x: Callable
    jump_u: Callable
    jump_cap: int = None
    name: str = "sde"
    probe_states: tuple = (0.5, 1.0, 2.0)
    probe_controls: tuple = (0.2, 0.5, 0.8)
    validate: bool = True

    def __post_init__(self):
        if not np.isfinite(self.x0):
            raise ValueError("x0 must be finite")
        if self.validate:
            report = probe_derivatives(self)
            bad = [k for k, v in report.items() if v > FD_TOLERANCE]
            if bad:
                raise ValueError(f"derivative callbacks disagree with finite differences: {bad}")

    def noise(self, ensemble, k):
        """Increments driving the state at step k, shape (n, m)."""
        inc = ensemble.increments_tm[k]
        if self.jump_cap is None or ensemble.counts is None:
            return inc
        over = ensemble.counts_tm[k] > self.jump_cap
        if not over.any():
            return inc
        comp = np.asarray(ensemble.compensator_tm[k])
        return np.where(over, self.jump_cap - comp, inc)


@dataclass(frozen=True)
class CostSpec:
    """J(u) = E[sum_k f(t_k, u_k, X_k) dt + g(X_T)]."""

    running: Callable
    running_x: Callable
    running_u: Callable
    terminal: Callable
    terminal_x: Callable
    name: str = "cost"

    @classmethod
    def terminal_only(cls, g, g_x, name="terminal"):
        zero = lambda ctx, u, x: np.zeros(x.shape[0])
        zero_u = lambda ctx, u, x: np.zeros(u.shape)
        return cls(zero, zero, zero_u, g, g_x, name)

    def validate(self, n_controls=1, probe_states=(0.5, 1.0, 2.0)):
        ctx = _probe_context(len(probe_states), 1)
        x = np.asarray(probe_states, dtype=np.float64)
        u = np.full((x.size, n_controls), 0.5)
        errs = {"g'": _fd_error(lambda xx: self.terminal(xx), self.terminal_x(x), x),
                "f_x": _fd_error(lambda xx: self.running(ctx, u, xx), self.running_x(ctx, u, x), x)}
        fu = self.running_u(ctx, u, x)
        errs["f_u"] = max((_fd_error(lambda uc: self.running(ctx, _replace_col(u, c, uc), x),
                                     fu[:, c], u[:, c]) for c in range(n_controls)), default=0.0)
        bad = [k for k, v in errs.items() if v > FD_TOLERANCE]
        if bad:
            raise ValueError(f"cost derivative callbacks disagree with finite differences: {bad}")
        return errs


def _probe_context(n, m):
    return StepContext(0, 0.0, 1.0, np.ones((n, m)), np.zeros((n, m)), np.zeros((n, m), dtype=np.int32))


def _replace_col(u, c, col):
    out = u.copy()
    out[:, c] = col
    return out


def _fd_error(func, analytic, at):
    h = 1e-6 * np.maximum(1.0, np.abs(at))
    up, dn = np.asarray(func(at + h), dtype=np.float64), np.asarray(func(at - h), dtype=np.float64)
    step = (2 * h).reshape((-1,) + (1,) * (up.ndim - 1))
    fd = (up - dn) / step
    analytic = np.asarray(analytic, dtype=np.float64).reshape(fd.shape)
    scale = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(fd - analytic) / scale))


def probe_derivatives(sde):
    """Max relative gap between derivative callbacks and central differences."""
    xs = np.asarray(sde.probe_states, dtype=np.float64)
    us = np.asarray(sde.probe_controls, dtype=np.float64)
    x = np.repeat(xs, us.size)
    u = np.tile(us, xs.size)[:, None].repeat(sde.n_controls, axis=1)
    ctx = _probe_context(x.size, sde.n_marks)
    out = {"drift_x": _fd_error(lambda xx: sde.drift(ctx, u, xx), sde.drift_x(ctx, u, x), x),
           "jump_x": _fd_error(lambda xx: sde.jump(ctx, u, xx), sde.jump_x(ctx, u, x), x)}
    bu, ju = sde.drift_u(ctx, u, x), sde.jump_u(ctx, u, x)
    out["drift_u"] = max(_fd_error(lambda uc: sde.drift(ctx, _replace_col(u, c, uc), x), bu[:, c], u[:, c])
                         for c in range(sde.n_controls))
    out["jump_u"] = max(_fd_error(lambda uc: sde.jump(ctx, _replace_col(u, c, uc), x), ju[:, :, c], u[:, c])
                        for c in range(sde.n_controls))
    return out


# -- policies -----------------------------------------------------------------

class ControlPolicy:
    """Parametric feedback control constrained to an open box.

    The box applies to ``coordinate(u, x)``; admissible parameters keep that
    coordinate inside the box shrunk by ``margin`` (default 1e-3 of its width).
    """

    def __init__(self, theta, lower, upper, margin=None, observables=FULL_INFORMATION):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if np.any(self.lower >= self.upper):
            raise ValueError("control box needs lower < upper")
        width = self.upper - self.lower
        self.margin = 1e-3 * width if margin is None else np.broadcast_to(np.asarray(margin, float), width.shape).copy()
        if np.any(self.margin <= 0) or np.any(2 * self.margin >= width):
            raise ValueError("margin must be positive and smaller than half the box width")
        self.observables = observables
        self.theta = self.project(np.asarray(theta, dtype=np.float64), check=True)

    @property
    def n_controls(self):
        return self.lower.size

    @property
    def n_params(self):
        return self.theta.size

    def project(self, theta, check=False):
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        lo, hi = self.theta_bounds()
        if check and (np.any(theta < lo) or np.any(theta > hi)):
            raise ValueError(f"parameter {theta} outside the admissible box [{lo}, {hi}]")
        return np.clip(theta, lo, hi)

    def theta_bounds(self):
        return self.lower + self.margin, self.upper - self.margin

    def with_theta(self, theta):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.theta = self.project(theta)
        return new

    def coordinate(self, u, x):
        return u

    def amount_scale(self, x):
        """Factor turning a coordinate-space perturbation into a control perturbation."""
        return np.ones_like(x)

    def controls(self, ctx, x):
        raise NotImplementedError

    def dtheta(self, ctx, x):
        """du/dtheta, shape (n, n_controls, n_params)."""
        raise NotImplementedError

    def check_values(self, u, x, shrunk=True):
        c = self.coordinate(u, x)
        lo = self.lower + (self.margin if shrunk else 0.0)
        hi = self.upper - (self.margin if shrunk else 0.0)
        inside = (c >= lo) & (c <= hi) if shrunk else (c > lo) & (c < hi)
        return bool(np.all(inside))

    def describe(self):
        return {"type": type(self).__name__, "theta": [float(v) for v in self.theta],
                "lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "margin": self.margin.tolist()}


class ConstantPolicy(ControlPolicy):
    """u_t = theta, one parameter per control."""

    def controls(self, ctx, x):
        return np.broadcast_to(self.theta, (x.shape[0], self.n_controls)).copy()

    def dtheta(self, ctx, x):
        return np.broadcast_to(np.eye(self.n_controls), (x.shape[0], self.n_controls, self.n_controls))


class ProportionalPolicy(ControlPolicy):
    """u_t = theta * X_t per control; the box constrains the proportions."""

    def coordinate(self, u, x):
        return u / x[:, None]

    def amount_scale(self, x):
        return x

    def controls(self, ctx, x):
        return self.theta[None, :] * x[:, None]

    def dtheta(self, ctx, x):
        eye = np.eye(self.n_controls)
        return x[:, None, None] * eye[None, :, :]


# -- state paths ----------------------------------------------------------------

@dataclass(eq=False)
class StatePaths:
    """State X_tm (K+1, n) and realized controls u_tm (K, n, c) on one ensemble.

    ``X`` (n, K+1) and ``u`` (n, K, c) are path-major views.
    """

    ensemble: object
    sde: ControlledSDESpec
    X_tm: np.ndarray
    u_tm: np.ndarray
    policy: object = None
    extras_tm: dict = field(default_factory=dict)

    @property
    def X(self):
        return self.X_tm.T

    @property
    def u(self):
        return np.moveaxis(self.u_tm, 0, 1)

    @property
    def n_paths(self):
        return self.X_tm.shape[1]

    @property
    def extras(self):
        return {name: np.moveaxis(a, 0, 1) for name, a in self.extras_tm.items()}

    def context(self, k):
        return step_context(self.ensemble, k, self.extras_tm)

    def partials(self, k):
        ctx = self.context(k)
        u, x = self.u_tm[k], self.X_tm[k]
        s = self.sde
        return {"ctx": ctx, "b_x": s.drift_x(ctx, u, x), "b_u": s.drift_u(ctx, u, x),
                "phi_x": s.jump_x(ctx, u, x), "phi_u": s.jump_u(ctx, u, x)}

    def multiplier(self, k):
        """1 + b_x dt + sum_z phi_x mu, the one-step factor of G."""
        d = self.partials(k)
        return 1.0 + d["b_x"] * self.ensemble.dt + np.sum(d["phi_x"] * self.sde.noise(self.ensemble, k), axis=1)

    def export_rows(self, max_paths=None):
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        K, c = self.u_tm.shape[0], self.u_tm.shape[2]
        for i in range(n):
            for k in range(K + 1):
                uk = self.u_tm[k, i] if k < K else np.full(c, np.nan)
                yield [i, k, self.X_tm[k, i]] + list(uk)


def simulate_state(ensemble, sde, policy=None, controls=None, extras=None):
    """Euler recursion with controls evaluated at left endpoints.

    Pass either a feedback ``policy`` or a frozen ``controls`` array of shape
    (n, K) or (n, K, c).
    """
    if (policy is None) == (controls is None):
        raise ValueError("pass exactly one of policy or controls")
    if ensemble.n_marks != sde.n_marks:
        raise ValueError("SDE and ensemble have different mark spaces")
    n, K = ensemble.n_paths, ensemble.n_steps
    if controls is not None:
        controls = np.asarray(controls, dtype=np.float64)
        if controls.ndim == 2:
            controls = controls[:, :, None]
        controls = np.moveaxis(np.broadcast_to(controls, (n, K, sde.n_controls)), 1, 0)
    return _simulate_tm(ensemble, sde, policy, controls, _extras_tm(extras))


def _simulate_tm(ensemble, sde, policy, controls_tm, extras_tm):
    n, K = ensemble.n_paths, ensemble.n_steps
    X = np.empty((K + 1, n))
    X[0] = sde.x0
    U = np.empty((K, n, sde.n_controls))
    dt = ensemble.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            ctx = step_context(ensemble, k, extras_tm)
            x = X[k]
            U[k] = policy.controls(ctx, x) if policy is not None else controls_tm[k]
            u = U[k]
            jump = sde.jump(ctx, u, x)
            X[k + 1] = x + sde.drift(ctx, u, x) * dt + np.sum(jump * sde.noise(ensemble, k), axis=1)
            if not np.all(np.isfinite(X[k + 1])):
                bad = int(np.flatnonzero(~np.isfinite(X[k + 1]))[0])
                raise FloatingPointError(f"state became non-finite at step {k + 1} on path {bad}")
    return StatePaths(ensemble, sde, X, U, policy, extras_tm)


def first_variation(states, anchor):
    """G_s(anchor) for s = anchor..K, shape (n, K - anchor + 1)."""
    K = states.ensemble.n_steps
    if not 0 <= anchor <= K:
        raise ValueError("anchor outside the grid")
    G = np.empty((K - anchor + 1, states.n_paths))
    G[0] = 1.0
    for j, k in enumerate(range(anchor, K)):
        G[j + 1] = G[j] * states.multiplier(k)
    return G.T


def _as_perturbation(states, beta):
    """Path-major beta (n, K, c), (n, K) or broadcastable, as time-major (K, n, c)."""
    K, n, c = states.u_tm.shape
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 2 and c == 1 and beta.shape == (n, K):
        beta = beta[:, :, None]
    return np.moveaxis(np.broadcast_to(beta, (n, K, c)), 1, 0)


def check_perturbation(states, beta_tm):
    """u +- beta must stay inside the open control set on every path."""
    pol = states.policy
    if pol is None:
        return
    for k in range(states.u_tm.shape[0]):
        u, b, x = states.u_tm[k], beta_tm[k], states.X_tm[k]
        if not (pol.check_values(u + b, x, shrunk=False) and pol.check_values(u - b, x, shrunk=False)):
            raise ValueError(f"perturbation leaves the control set at step {k}")


def variation_process(states, beta, check=True):
    """Y of the linearized state equation along perturbation beta, (n, K+1)."""
    beta = _as_perturbation(states, beta)
    if check:
        check_perturbation(states, beta)
    return _variation_tm(states, beta).T


def _variation_tm(states, beta_tm):
    e = states.ensemble
    K = e.n_steps
    Y = np.zeros((K + 1, states.n_paths))
    dt = e.dt
    for k in range(K):
        d = states.partials(k)
        mu = states.sde.noise(e, k)
        bk = beta_tm[k]
        drift = d["b_x"] * Y[k] + np.einsum("ic,ic->i", d["b_u"], bk)
        jump = d["phi_x"] * Y[k][:, None] + np.einsum("izc,ic->iz", d["phi_u"], bk)
        Y[k + 1] = Y[k] + drift * dt + np.sum(jump * mu, axis=1)
    return Y


def gateaux_samples(states, cost, beta, check=True):
    """Per-path integrand of the Gateaux derivative along beta."""
    beta = _as_perturbation(states, beta)
    if check:
        check_perturbation(states, beta)
    Y = _variation_tm(states, beta)
    dt = states.ensemble.dt
    total = np.zeros(states.n_paths)
    for k in range(states.u_tm.shape[0]):
        ctx = states.context(k)
        u, x = states.u_tm[k], states.X_tm[k]
        total += (cost.running_x(ctx, u, x) * Y[k]
                  + np.einsum("ic,ic->i", cost.running_u(ctx, u, x), beta[k])) * dt
    return total + cost.terminal_x(states.X_tm[-1]) * Y[-1]


def gateaux_derivative(states, cost, beta, check=True):
    return MeanEstimate.of(gateaux_samples(states, cost, beta, check))


def performance_samples(states, cost):
    dt = states.ensemble.dt
    total = np.zeros(states.n_paths)
    for k in range(states.u_tm.shape[0]):
        ctx = states.context(k)
        total += cost.running(ctx, states.u_tm[k], states.X_tm[k]) * dt
    return total + cost.terminal(states.X_tm[-1])


def performance(states, cost):
    return MeanEstimate.of(performance_samples(states, cost))


def finite_difference_gateaux(states, cost, beta, h):
    """[J(u + h beta) - J(u - h beta)] / (2h) on common random numbers."""
    beta = _as_perturbation(states, beta)
    e, sde, ex = states.ensemble, states.sde, states.extras_tm
    up = _simulate_tm(e, sde, None, states.u_tm + h * beta, ex)
    dn = _simulate_tm(e, sde, None, states.u_tm - h * beta, ex)
    return MeanEstimate.of((performance_samples(up, cost) - performance_samples(dn, cost)) / (2 * h))

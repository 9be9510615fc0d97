"""Cross-sectional ridge regression used as a conditional expectation.

A ``RegressionBasis`` turns information available at a grid step into a
feature-major design matrix of monomials, shape (p, n) with the intercept in
row 0.  ``fit_design`` standardizes the design, drops constant or duplicated
columns, and solves the trace-scaled ridge system.  Gram matrices are built
with ``numpy.einsum`` so the summation order does not depend on the BLAS
threading configuration.
"""

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

RIDGE = 1e-8
_CONST_TOL = 1e-12


@dataclass(frozen=True)
class Observables:
    """Declared information set for a policy and its projections.

    ``marks`` restricts mark-indexed features to a subset of mark indices
    (None keeps all); ``state_lag`` makes the state feature X_{k-lag}.
    """

    marks: tuple = None
    state_lag: int = 0

    def __post_init__(self):
        if self.state_lag < 0:
            raise ValueError("state_lag must be non-negative")
        if self.marks is not None:
            object.__setattr__(self, "marks", tuple(int(z) for z in self.marks))

    def mark_indices(self, n_marks):
        if self.marks is None:
            return tuple(range(n_marks))
        if any(not 0 <= z < n_marks for z in self.marks):
            raise ValueError("observable mark index outside the mark space")
        return self.marks


FULL_INFORMATION = Observables()


class FeatureContext:
    """Per-step raw features on one ensemble (plus optional state paths)."""

    def __init__(self, ensemble, states=None, observables=FULL_INFORMATION):
        self.ensemble = ensemble
        self.states = states
        self.observables = observables
        self.n_paths = ensemble.n_paths

    def feature(self, name, k):
        """Rows (q, n) for a named feature at step k."""
        e, obs = self.ensemble, self.observables
        marks = list(obs.mark_indices(e.n_marks))
        if name == "state":
            if self.states is None:
                raise ValueError("state feature requested but no state paths supplied")
            return self.states.X_tm[max(k - obs.state_lag, 0)][None, :]
        if name == "noise":
            return e.running_noise_tm[k][:, marks].T
        if name == "count":
            return _counts(e)[k][:, marks].T.astype(np.float64)
        if name == "alive":
            return (_counts(e)[k][:, marks].T == 0).astype(np.float64)
        if name == "intensity":
            lam = e.intensity_tm[min(k, e.n_steps - 1)]
            return np.array(lam[:, marks].T, dtype=np.float64)
        raise ValueError(f"unknown feature {name!r}")


def _counts(e):
    if e.running_counts_tm is None:
        raise ValueError("count-based feature needs a counting noise")
    return e.running_counts_tm


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of total degree <= ``degree`` in the listed features.

    Named features are ``state``, ``noise``, ``count``, ``alive`` and
    ``intensity``; mark-indexed ones expand to one row per observed mark.
    ``extra`` holds callables ``(context, k) -> (n,)`` appended as features.
    """

    features: tuple = ("noise",)
    degree: int = 2
    extra: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    def raw(self, ctx, k):
        rows = [np.asarray(ctx.feature(name, k), dtype=np.float64) for name in self.features]
        rows += [np.asarray(f(ctx, k), dtype=np.float64)[None, :] for f in self.extra]
        if not rows:
            return np.zeros((0, ctx.n_paths))
        return np.concatenate(rows, axis=0)

    def design(self, ctx, k):
        """Full monomial design (p, n); row 0 is the intercept."""
        base = self.raw(ctx, k)
        q, n = base.shape
        combos = [c for d in range(1, self.degree + 1) for c in combinations_with_replacement(range(q), d)]
        out = np.empty((1 + len(combos), n))
        out[0] = 1.0
        for r, combo in enumerate(combos, start=1):
            np.copyto(out[r], base[combo[0]])
            for j in combo[1:]:
                out[r] *= base[j]
        return out


def gram(a, b=None):
    b = a if b is None else b
    return np.einsum("jn,kn->jk", a, b)


@dataclass(frozen=True)
class CellFit:
    """Fitted ridge regression on a standardized subset of design rows.

    ``coef`` has shape (p,) for one response or (p, r) for r responses;
    ``cov`` is the heteroskedasticity-robust coefficient covariance, (p, p)
    or (r, p, p).
    """

    rows: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    cov: np.ndarray = None
    n_used: int = 0

    def transform(self, design):
        out = np.empty((self.rows.size + 1, design.shape[1]))
        out[0] = 1.0
        out[1:] = design[self.rows]
        out[1:] -= self.center[:, None]
        out[1:] /= self.scale[:, None]
        return out

    def predict(self, design):
        """Fitted values (n,) or (r, n)."""
        return np.einsum("pn,p...->...n", self.transform(design), self.coef)

    @property
    def n_coef(self):
        return self.coef.shape[0]


class DegenerateDesign(ValueError):
    pass


def fit_design(design, response, with_cov=False):
    """Ridge regression of ``response`` (n,) or (r, n) on a (p, n) design.

    Constant rows and exact duplicates are dropped, the rest standardized; the
    intercept is not penalized.
    """
    y = np.asarray(response, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("regression response contains non-finite values")
    n = design.shape[1]
    x = design[1:]
    center = x.mean(axis=1)
    scale = x.std(axis=1)
    keep = np.flatnonzero(scale > _CONST_TOL * np.maximum(1.0, np.abs(center)))
    z = np.empty((keep.size + 1, n))
    z[0] = 1.0
    z[1:] = (x[keep] - center[keep, None]) / scale[keep, None]
    a = gram(z)
    # standardized duplicates have unit correlation; keep the first of each
    dup = [j for j in range(1, a.shape[0])
           if any(abs(a[i, j]) >= n * (1 - 1e-12) for i in range(1, j))]
    if dup:
        sel = np.array([j for j in range(a.shape[0]) if j not in dup])
        z, a = z[sel], a[np.ix_(sel, sel)]
        keep = keep[sel[1:] - 1]
    p = a.shape[0]
    if p > 1:
        a[1:, 1:] += RIDGE * np.trace(a[1:, 1:]) / (p - 1) * np.eye(p - 1)
    rhs = np.einsum("pn,...n->p...", z, y)
    try:
        coef = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDesign("design matrix is singular even after ridge") from exc
    if not np.all(np.isfinite(coef)) or np.linalg.cond(a) > 1e13:
        raise DegenerateDesign("design matrix is degenerate even after ridge")
    cov = None
    if with_cov:
        inv = np.linalg.inv(a)
        resid = y - np.einsum("pn,p...->...n", z, coef)
        if resid.ndim == 1:
            cov = inv @ gram(z * resid, z * resid) @ inv
        else:
            cov = np.stack([inv @ gram(z * r, z * r) @ inv for r in resid])
    return CellFit(keep + 1, center[keep], scale[keep], coef, cov, n)


def predictive_variance(fit, design, weights=None, response=None):
    """Variance of mean(weights * prediction) induced by coefficient noise."""
    if fit.cov is None:
        return 0.0
    x = fit.transform(design)
    n = x.shape[1]
    g = x.sum(axis=1) / n if weights is None else x @ np.broadcast_to(weights, (n,)) / n
    cov = fit.cov if response is None else fit.cov[response]
    return float(g @ cov @ g)

"""Non-anticipating derivative estimates and their diagnostics.

On a cell (t, s] x {z} the derivative is approximated by
E[xi * mu(cell) / Lambda(cell) | G_t], computed by regressing the per-path
ratio on features observed at t.  The fitted values form a predictable field,
piecewise constant on the cells of one level of a dissecting system.
"""

from dataclasses import dataclass, field

import numpy as np

from .noise import Cell, MeanEstimate, _as_field
from .regression import FeatureContext, RegressionBasis, fit_design, predictive_variance

LAMBDA_CLAMP = 1e-12
LAMBDA_DROP = 1e-8


@dataclass(frozen=True)
class TargetVariable:
    values: np.ndarray
    label: str = "xi"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("target must be one value per path")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"target {self.label!r} has non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def as_target(target):
    return target if isinstance(target, TargetVariable) else TargetVariable(target)


def stochastic_intensity(ensemble):
    """True when the intensity differs across paths."""
    return ensemble.intensity_varies


def default_basis(ensemble, with_state=False, degree=2):
    """Degree-2 polynomials in state, running noise and (if random) intensity."""
    feats = ["state"] if with_state else []
    feats.append("noise")
    if stochastic_intensity(ensemble):
        feats.append("intensity")
    return RegressionBasis(tuple(feats), degree)


@dataclass(eq=False)
class DerivativeField:
    """Cell-wise regression estimate of the derivative.

    ``cell_values`` has shape (n_cells, n_paths) and holds the fitted value of
    each cell on each path of ``context.ensemble``; ``values`` is the
    path-major view.  For anchor fields the cells overlap and ``anchors``
    gives the step each cell belongs to.
    """

    level: int
    cells: tuple
    fits: list
    cell_values: np.ndarray
    basis: RegressionBasis
    context: FeatureContext
    label: str = "xi"
    dropped: tuple = ()
    anchors: tuple = None
    fitted_on: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ensemble(self):
        return self.context.ensemble

    @property
    def values(self):
        return self.cell_values.T

    @property
    def single_ensemble(self):
        return self.fitted_on is self.context.ensemble

    def coefficients(self, index):
        fit = self.fits[index]
        return None if fit is None else fit.coef

    def evaluate(self, context):
        """Same fitted coefficients, evaluated on another ensemble."""
        values = _evaluate(self.cells, self.fits, self.basis, context)
        return DerivativeField(self.level, self.cells, self.fits, values, self.basis, context,
                               self.label, self.dropped, self.anchors, self.fitted_on,
                               dict(self.diagnostics))

    def recompute(self):
        """Fitted values rebuilt from left-endpoint features and coefficients."""
        return _evaluate(self.cells, self.fits, self.basis, self.context)

    def grid_values_tm(self):
        """(K, n, m) array: partition fields spread over steps, anchor fields by anchor."""
        e = self.ensemble
        out = np.zeros((e.n_steps, e.n_paths, e.n_marks))
        if self.anchors is not None:
            for j, (c, k) in enumerate(zip(self.cells, self.anchors)):
                out[k, :, c.marks[0]] = self.cell_values[j]
            return out
        for j, c in enumerate(self.cells):
            for z in c.marks:
                out[c.start:c.stop, :, z] = self.cell_values[j]
        return out

    def grid_values(self):
        """Path-major (n, K, m) view of ``grid_values_tm``."""
        return np.moveaxis(self.grid_values_tm(), 0, 1)

    def fit_variance(self, index, weights=None):
        fit = self.fits[index]
        if fit is None:
            return 0.0
        design = self.basis.design(self.context, self.cells[index].start)
        return predictive_variance(fit, design, weights)

    def export_rows(self, grid, marks):
        edges = grid.edges
        for j, (c, fit) in enumerate(zip(self.cells, self.fits)):
            coef = [] if fit is None else list(np.ravel(fit.coef))
            yield [self.level, j, edges[c.start], edges[c.stop], marks.labels[c.marks[0]]] + coef


def _evaluate(cells, fits, basis, context):
    values = np.zeros((len(cells), context.n_paths))
    step, design = None, None
    for j, (c, fit) in enumerate(zip(cells, fits)):
        if fit is None:
            continue
        if c.start != step:
            step, design = c.start, basis.design(context, c.start)
        values[j] = fit.predict(design)
    return values


def fit_cells(ensemble, cells, targets, basis, context=None, fit_context=None, with_cov=True):
    """Regress targets * mu(cell) / Lambda(cell) on features at each cell start.

    ``targets`` is either one array (n,) shared by all cells or a callable
    ``cell_index -> (n,)``.  Cells sharing a start step share one design.
    Returns (fits, dropped, sample sizes).
    """
    fit_context = fit_context or FeatureContext(ensemble)
    fits, dropped, sizes = [None] * len(cells), [], [0] * len(cells)
    design_step, design = None, None
    for j, c in enumerate(cells):
        comp = ensemble.cell_compensator(c)
        if comp.mean() < LAMBDA_DROP:
            dropped.append(j)
            continue
        xi = targets(j) if callable(targets) else targets
        response = xi * ensemble.cell_increment(c) / np.maximum(comp, LAMBDA_CLAMP)
        if design_step != c.start:
            design_step, design = c.start, basis.design(fit_context, c.start)
        fits[j] = fit_design(design, response, with_cov=with_cov)
        sizes[j] = fits[j].n_used
    if len(dropped) == len(cells):
        raise ValueError("every cell was dropped: the noise carries no variance on this system")
    return fits, tuple(dropped), sizes


def estimate_derivative(ensemble, target, system, level, basis=None, states=None,
                        eval_context=None, with_cov=True):
    """Derivative field of ``target`` on the level-``level`` cells.

    Fitted on ``ensemble`` (with optional ``states`` for state features).
    Values are reported on ``eval_context`` when given; otherwise on the
    fitting ensemble, which is flagged as single-ensemble mode.
    """
    target = as_target(target)
    if len(target) != ensemble.n_paths:
        raise ValueError("target length does not match the ensemble")
    if system.grid != ensemble.grid:
        raise ValueError("dissecting system grid differs from the ensemble grid")
    basis = basis or default_basis(ensemble, with_state=states is not None)
    cells = system.cells(level)
    fit_ctx = FeatureContext(ensemble, states)
    fits, dropped, sizes = fit_cells(ensemble, cells, target.values, basis, fit_context=fit_ctx,
                                     with_cov=with_cov)
    ctx = eval_context or fit_ctx
    values = _evaluate(cells, fits, basis, ctx)
    return DerivativeField(level, cells, fits, values, basis, ctx, target.label, dropped,
                           fitted_on=ensemble, diagnostics={"sample_size": sizes})


def estimate_anchor_field(ensemble, targets, width, basis, states=None, eval_context=None,
                          with_cov=True, label="anchor"):
    """Diagonal field: for each step k the cell (k, k+width] per mark.

    ``targets`` is a time-major array (K, n) or (K+1, n) whose row k is the
    anchor-k target, e.g. K_{t_k} or p_{t_k}.
    """
    K, m = ensemble.n_steps, ensemble.n_marks
    targets = np.asarray(targets, dtype=np.float64)
    cells, anchors = [], []
    for k in range(K):
        for z in range(m):
            cells.append(Cell(k, min(k + width, K), (z,)))
            anchors.append(k)
    fit_ctx = FeatureContext(ensemble, states)
    fits, dropped, sizes = fit_cells(ensemble, cells, lambda j: targets[anchors[j]], basis,
                                     fit_context=fit_ctx, with_cov=with_cov)
    ctx = eval_context or fit_ctx
    values = _evaluate(cells, fits, basis, ctx)
    level = int(round(np.log2(K / width))) if K % width == 0 else None
    return DerivativeField(level, tuple(cells), fits, values, basis, ctx, label, dropped,
                           tuple(anchors), fitted_on=ensemble, diagnostics={"sample_size": sizes})


# -- diagnostics --------------------------------------------------------------

@dataclass(frozen=True)
class DualityRecord:
    lhs: float
    rhs: float
    gap: float
    lhs_se: float
    rhs_se: float
    combined_se: float
    single_ensemble: bool

    def passed(self, n_se=4.0):
        return abs(self.gap) <= n_se * self.combined_se


def _check_same_grid(ensemble, fld):
    if fld.ensemble.grid != ensemble.grid or fld.ensemble.n_marks != ensemble.n_marks:
        raise ValueError("field and ensemble grids differ")


def _field_on(ensemble, fld, states=None):
    _check_same_grid(ensemble, fld)
    if fld.ensemble is ensemble:
        return fld
    return fld.evaluate(FeatureContext(ensemble, states))


def duality_gap(ensemble, target, kappa, fld, states=None):
    """Compare E[xi * int kappa dmu] with E[int field * kappa * lambda dt].

    The combined standard error adds the per-path variance of the difference
    and the coefficient uncertainty of the fitted field.
    """
    xi = as_target(target).values
    fld = _field_on(ensemble, fld, states)
    kap = np.moveaxis(_as_field(ensemble, kappa), 1, 0)
    lhs_i = xi * np.einsum("kiz,kiz->i", kap, ensemble.increments_tm)
    weight = kap * ensemble.compensator_tm
    rhs_i = np.zeros(ensemble.n_paths)
    fit_var = 0.0
    for j, c in enumerate(fld.cells):
        if fld.fits[j] is None:
            continue
        w = weight[c.start:c.stop][:, :, list(c.marks)].sum(axis=(0, 2))
        rhs_i += fld.cell_values[j] * w
        if not fld.single_ensemble:
            fit_var += fld.fit_variance(j, w)
    diff = MeanEstimate.of(lhs_i - rhs_i)
    lhs, rhs = MeanEstimate.of(lhs_i), MeanEstimate.of(rhs_i)
    combined = float(np.sqrt(diff.std_error ** 2 + fit_var))
    return DualityRecord(lhs.value, rhs.value, lhs.value - rhs.value, lhs.std_error,
                         float(np.sqrt(rhs.std_error ** 2 + fit_var)), combined, fld.single_ensemble)


@dataclass(frozen=True)
class RepresentationRecord:
    xi0_estimate: float
    residual_variance: float
    target_variance: float
    orthogonality_zscores: np.ndarray
    residuals: np.ndarray = field(repr=False, default=None)


def representation_residual(ensemble, target, fld, states=None):
    """Residual xi - E[xi] - int field dmu and its orthogonality z-scores.

    The test family is the simple integrands h * 1_cell on the field's cells
    with h in {1, standardized running noise at the cell start}.  Z-score
    denominators include the coefficient uncertainty of the fitted field.
    """
    xi = as_target(target).values
    fld = _field_on(ensemble, fld, states)
    mu = [ensemble.cell_increment(c) for c in fld.cells]
    integral = np.zeros(ensemble.n_paths)
    for j, v in enumerate(mu):
        integral += fld.cell_values[j] * v
    xi0 = float(xi.mean())
    resid = xi - xi0 - integral
    tests = []
    for j, c in enumerate(fld.cells):
        tests.append(mu[j])
        run = ensemble.running_noise_tm[c.start].sum(axis=1)
        if run.std() > 0:
            tests.append((run - run.mean()) / run.std() * mu[j])
    designs = [fld.basis.design(fld.context, c.start) if f is not None else None
               for c, f in zip(fld.cells, fld.fits)]
    zs = []
    for integ in tests:
        est = MeanEstimate.of(resid * integ)
        var = est.std_error ** 2
        for j, fit in enumerate(fld.fits):
            if fit is not None and fit.cov is not None:
                var += predictive_variance(fit, designs[j], mu[j] * integ)
        se = np.sqrt(var)
        zs.append(est.value / se if se > 0 else 0.0)
    return RepresentationRecord(xi0, float(resid.var(ddof=1)), float(xi.var(ddof=1)),
                                np.array(zs), resid)

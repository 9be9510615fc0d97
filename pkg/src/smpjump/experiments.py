"""Experiment pipelines behind the command line, and report persistence.

Each experiment kind maps a validated ``ExperimentConfig`` to a ``RunReport``
holding named checks (value, expected value, tolerance, pass flag and either a
standard error or an exactness flag), the stages that ran with the concept
each one realizes, summary values and tabular artifacts.  ``write_report``
persists the report; the summary JSON depends only on the config, so reruns
are byte-identical.
"""

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .adjoint import anchor_duality, compute_adjoints, state_derivatives_vanish
from .config import serialize_config
from .credit import (CreditMarketSpec, Utility, analytic_log_optimum, build_credit_market,
                     corollary_residual, estimate_performance, proportion_grid, proportion_policy)
from .derivative import duality_gap, estimate_derivative, representation_residual
from .dissecting import build_dissecting_system, verify_system
from .io import save_ensemble, write_csv
from .maxprinciple import (OptimizerConfig, criticality_score, hamiltonian_gradient,
                           optimize_policy, project_gradient, projection_basis, projection_context,
                           simple_perturbation, theorem_consistency)
from .noise import (Brownian, CompensatedPoisson, DoublyStochasticPoisson, IntensityDriver,
                    MarkSpace, MeanEstimate, TimeGrid, field_property_suite, isometry_gap,
                    sample_ensemble)
from .oracles import binomial_tree, poisson_conditional, tree_conditional
from .regression import FeatureContext, RegressionBasis, fit_design, predictive_variance
from .rng import derive_seed
from .state import (ConstantPolicy, ControlledSDESpec, CostSpec, first_variation,
                    gateaux_samples, performance_samples, simulate_state, variation_process)
from .toys import quadratic_toy, toy_policy

#: ensembles with at most this many (path, step, mark) cells are saved as binary
MAX_SAVED_CELLS = 1_000_000
N_SE = 4.0


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class Check:
    name: str
    value: object
    expected: object
    tolerance: object
    passed: bool
    std_error: float = None
    exact: bool = False

    def as_dict(self):
        return {"name": self.name, "value": _plain(self.value), "expected": _plain(self.expected),
                "tolerance": _plain(self.tolerance), "std_error": _plain(self.std_error),
                "exact": self.exact, "passed": bool(self.passed)}


@dataclass
class Artifact:
    name: str
    header: list
    rows: list


@dataclass
class RunReport:
    config: object
    checks: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    texts: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def add(self, name, value, expected, tolerance, passed, std_error=None, exact=False):
        self.checks.append(Check(name, value, expected, tolerance, bool(passed), std_error, exact))
        return self.checks[-1]

    def within(self, name, value, expected, std_error, n_se=N_SE):
        """Check |value - expected| <= n_se * std_error."""
        ok = abs(value - expected) <= n_se * std_error
        return self.add(name, value, expected, f"{n_se:g} SE", ok, std_error)

    def exact(self, name, value, expected=0.0):
        return self.add(name, value, expected, 0.0, value == expected, exact=True)

    def check(self, name):
        """First check with the given name."""
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self):
        cfg = self.config
        return {"kind": None if cfg is None else cfg.kind,
                "seed": None if cfg is None else cfg.seed,
                "config": {} if cfg is None else cfg.echo(),
                "stages": list(self.stages),
                "checks": [c.as_dict() for c in self.checks],
                "values": {k: _plain(v) for k, v in self.values.items()},
                "artifacts": sorted(_artifact_paths(self)),
                "n_checks": len(self.checks),
                "n_failed": sum(not c.passed for c in self.checks),
                "passed": self.passed}


def _plain(v):
    """JSON-safe numbers, arrays and tuples; non-finite floats become strings."""
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def _artifact_paths(report):
    paths = [f"artifacts/{a.name}.csv" for a in report.artifacts]
    paths += [f"artifacts/{name}" for name in report.texts]
    paths += [f"ensembles/{name}.bin" for name, e in report.ensembles.items() if _saveable(e)]
    return paths


def _saveable(ensemble):
    return ensemble.n_paths * ensemble.n_steps * ensemble.n_marks <= MAX_SAVED_CELLS


@contextmanager
def stage(report, name, anchor):
    """Record a pipeline stage and the concept it realizes; wrap failures."""
    report.stages.append({"stage": name, "anchor": anchor})
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- shared builders --------------------------------------------------------------

def make_grid(cfg):
    return TimeGrid(cfg["grid.horizon"], cfg["grid.steps"])


def make_noise(cfg, kind=None):
    """(model, marks) for the configured noise, or for ``kind`` when given."""
    kind = kind or cfg["noise.kind"]
    if kind == "brownian":
        return Brownian(), MarkSpace.singleton()
    m = cfg["noise.marks"]
    lam = np.broadcast_to(np.asarray(cfg["noise.intensity"]), (m,)).tolist()
    marks = MarkSpace.numbered(m)
    if kind == "poisson":
        return CompensatedPoisson(tuple(lam)), marks
    drivers = tuple(IntensityDriver(v, v, cfg["noise.reversion"], cfg["noise.volatility"]) for v in lam)
    return DoublyStochasticPoisson(drivers), marks


def total_intensity(model, n_marks):
    """Sum over marks of a constant Poisson intensity."""
    return float(np.sum(np.broadcast_to(model.intensities, (n_marks,))))


def sample(cfg, model, marks, label, n_paths=None, grid=None):
    """Ensemble whose seed is derived from the config seed and a stage label."""
    return sample_ensemble(model, grid or make_grid(cfg), marks, n_paths or cfg["paths"],
                           derive_seed(cfg.seed, label), threads=cfg["threads"])


def target_values(ensemble, name):
    """Named terminal variable per path: W_T, W_T^2, H_T, H_T^2 or constant."""
    if name == "W_T":
        return ensemble.terminal_noise()
    if name == "W_T^2":
        return ensemble.terminal_noise() ** 2
    if name in ("H_T", "H_T^2"):
        if ensemble.counts is None:
            raise ValueError(f"target {name} needs a counting noise")
        h = ensemble.running_counts_tm[-1].sum(axis=1).astype(np.float64)
        return h if name == "H_T" else h ** 2
    if name == "constant":
        return np.ones(ensemble.n_paths)
    raise ValueError(f"unknown target {name!r}")


def _noise_for_target(cfg, name):
    if name.startswith("W_"):
        return "brownian"
    if name.startswith("H_"):
        return "poisson" if cfg["noise.kind"] == "brownian" else cfg["noise.kind"]
    return cfg["noise.kind"]


def _rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# -- validate-noise -----------------------------------------------------------------

def run_validate_noise(cfg, report):
    model, marks = make_noise(cfg)
    grid = make_grid(cfg)
    with stage(report, "sample ensemble", "martingale random field"):
        e = sample(cfg, model, marks, "primary")
        report.ensembles["primary"] = e
    with stage(report, "isometry", "isometry of the stochastic integral"):
        iso = isometry_gap(e, 1.0)
        report.within("isometry gap, integrand 1", iso.gap.value, 0.0, iso.gap.std_error)
        sq = MeanEstimate.of(e.terminal_noise() ** 2)
        if isinstance(model, Brownian):
            report.within("E[mu((0,T])^2] vs T", sq.value, grid.horizon, sq.std_error)
            t_left = grid.edges[:-1]
            integral = e.increments[:, :, 0] @ t_left
            t_sq = MeanEstimate.of(integral ** 2)
            expected = float(np.sum(t_left ** 2) * grid.dt)
            report.within("E[(int t dW)^2] vs sum t_k^2 dt", t_sq.value, expected, t_sq.std_error)
        elif isinstance(model, CompensatedPoisson):
            expected = total_intensity(model, len(marks)) * grid.horizon
            report.within("E[mu((0,T] x Z)^2] vs lambda T", sq.value, expected, sq.std_error)
        report.values["isometry"] = {"lhs": iso.lhs, "rhs": iso.rhs, "gap": iso.gap.value,
                                     "std_error": iso.gap.std_error}
    with stage(report, "field axioms", "martingale random field axioms"):
        mean = MeanEstimate.of(e.terminal_noise())
        report.within("mean of mu((0,T] x Z)", mean.value, 0.0, mean.std_error)
        if e.counts is not None:
            h = MeanEstimate.of(e.running_counts_tm[-1].sum(axis=1).astype(np.float64))
            comp = float(np.mean(np.asarray(e.compensator_tm).sum(axis=(0, 2))))
            report.within("mean count vs mean compensator", h.value, comp, h.std_error)
        system = build_dissecting_system(grid, marks, cfg["dissect.level"])
        cells = system.cells(cfg["dissect.level"])
        suite = field_property_suite(e, cells)
        frac = suite.fraction_within(N_SE)
        report.add("fraction of z-scores within 4", frac, 1.0, ">= 0.99", frac >= 0.99)
        report.exact("additivity max residual", suite.additivity_max_residual)
        report.values["n_zscores"] = len(suite.martingale_z) + sum(len(o["z"]) for o in suite.orthogonality)
        report.artifacts.append(Artifact(
            "cell_checks", ["cell", "t_a", "t_b", "mark", "martingale_z", "isometry_gap", "isometry_se"],
            [[j, grid.edges[c.start], grid.edges[c.stop], marks.labels[c.marks[0]], z,
              i.gap.value, i.gap.std_error]
             for j, (c, z, i) in enumerate(zip(cells, suite.martingale_z, suite.isometry))]))


# -- dissect-check ------------------------------------------------------------------

def run_dissect_check(cfg, report):
    model, marks = make_noise(cfg)
    grid = make_grid(cfg)
    with stage(report, "build system", "dissecting system"):
        system = build_dissecting_system(grid, marks, cfg["dissect.level"])
        report.texts["dissecting_system.txt"] = system.dump()
    with stage(report, "verify system", "dissecting system"):
        e = sample(cfg, model, marks, "primary")
        report.ensembles["primary"] = e
        res = verify_system(system, e)
        report.add("partition, single mark and nesting relations", res["exact_relations"], True,
                   "exact", res["exact_relations"], exact=True)
        report.add("mesh strictly decreasing", res["mesh_decreasing"], True, "exact",
                   res["mesh_decreasing"], exact=True)
        report.add("max cell variance strictly decreasing", res["variance_decreasing"], True,
                   "strict", res["variance_decreasing"])
        rows = []
        for lv in res["levels"]:
            n = lv["level"]
            report.add(f"level {n} mesh below bound", lv["mesh"], system.mesh_bound(n), "strict <",
                       lv["mesh_below_bound"], exact=True)
            zs = [MeanEstimate.of(e.cell_increment(c) ** 2 - e.cell_compensator(c)).zscore()
                  for c in system.cells(n)]
            worst = float(np.max(np.abs(zs)))
            report.add(f"level {n} cell variances vs compensator", worst, 0.0, "max |z| <= 4",
                       worst <= N_SE)
            rows.append([n, lv["n_cells"], lv["mesh"], system.mesh_bound(n), lv["max_variance"], worst])
        report.artifacts.append(Artifact(
            "levels", ["level", "n_cells", "mesh", "mesh_bound", "max_variance", "max_abs_z"], rows))


# -- derivative-oracle ----------------------------------------------------------------

def _basis_for(cfg, name):
    degree = cfg["basis.degree"] if name.startswith("W_") else cfg["derivative.count_degree"]
    return RegressionBasis(("noise",), degree)


def run_derivative_oracle(cfg, report):
    grid = make_grid(cfg)
    level = cfg["dissect.level"]
    for name in cfg["derivative.targets"]:
        model, marks = make_noise(cfg, _noise_for_target(cfg, name))
        with stage(report, f"estimate {name}", "derivative as a limit over simple functions"):
            e = sample(cfg, model, marks, f"oracle-{name}")
            system = build_dissecting_system(grid, marks, level)
            fld = estimate_derivative(e, target_values(e, name), system, level, _basis_for(cfg, name),
                                      with_cov=False)
            starts = [c.start for c in fld.cells]
            if name == "W_T":
                rmse = float(np.sqrt(np.mean((fld.cell_values - 1.0) ** 2)))
                report.add("field for W_T vs 1 (RMSE)", rmse, 0.0, 0.05, rmse <= 0.05)
            elif name == "W_T^2":
                oracle = 2.0 * e.running_noise_tm[starts][:, :, 0]
                err = _rel_l2(fld.cell_values, oracle)
                report.add("field for W_T^2 vs 2 W_t (relative L2)", err, 0.0, 0.10, err <= 0.10)
            elif name == "H_T^2":
                if len(marks) != 1 or not isinstance(model, CompensatedPoisson):
                    raise ValueError("the H_T^2 oracle needs single-mark Poisson noise")
                lam = model.intensities[0]
                h_t = e.running_counts_tm[starts][:, :, 0]
                t = grid.edges[starts][:, None]
                oracle = 2.0 * (h_t + lam * (grid.horizon - t)) + 1.0
                err = _rel_l2(fld.cell_values, oracle)
                report.add("field for H_T^2 vs 2(H_t + lambda(T-t)) + 1 (relative L2)", err, 0.0,
                           0.10, err <= 0.10)
            else:
                raise ValueError(f"no closed-form oracle for target {name!r}")
            report.values[f"field_mean[{name}]"] = float(fld.cell_values.mean())
        with stage(report, f"brute force {name}", "derivative as a limit over simple functions"):
            _brute_force_check(cfg, report, name, model)


def _brute_force_check(cfg, report, name, model):
    steps = cfg["derivative.oracle_steps"]
    horizon = cfg["grid.horizon"]
    if name.startswith("W_"):
        tree = binomial_tree(steps, horizon)
        xi = target_values(tree, name)
        half = steps // 2
        exact = tree_conditional(tree, xi, half, steps)
        closed = np.ones(tree.n_paths) if name == "W_T" else 2.0 * tree.running_noise_tm[half][:, 0]
        err = float(np.max(np.abs(exact - closed)) / max(1.0, np.max(np.abs(closed))))
        report.add(f"{name}: closed form vs tree enumeration", err, 0.0, 0.01, err <= 0.01)
        system = build_dissecting_system(tree.grid, tree.marks, 1)
        fld = estimate_derivative(tree, xi, system, 1, _basis_for(cfg, name), with_cov=False)
        err = float(np.max(np.abs(fld.cell_values[1] - exact)) / max(1.0, np.max(np.abs(exact))))
        report.add(f"{name}: estimator on the tree vs enumeration", err, 0.0, 0.01, err <= 0.01)
    else:
        lam = model.intensities[0]
        t_a, t_b = 0.5 * horizon, 0.75 * horizon
        h = np.arange(6)
        enum = poisson_conditional(lambda n: n.astype(np.float64) ** 2, lam, horizon, t_a, t_b, h)
        closed = 2.0 * (h + lam * (horizon - t_a)) + 1.0
        err = float(np.max(np.abs(enum - closed) / np.abs(closed)))
        report.add(f"{name}: closed form vs Poisson enumeration", err, 0.0, 0.01, err <= 0.01)


# -- duality ----------------------------------------------------------------------

def _duality_once(cfg, name, n_paths, grid, label, two_ensemble, level):
    model, marks = make_noise(cfg, _noise_for_target(cfg, name))
    e = sample(cfg, model, marks, f"{label}-eval", n_paths, grid)
    system = build_dissecting_system(grid, marks, level)
    basis = RegressionBasis(("noise",), cfg["basis.degree"])
    if two_ensemble:
        f = sample(cfg, model, marks, f"{label}-fit", n_paths, grid)
        fld = estimate_derivative(f, target_values(f, name), system, level, basis,
                                  eval_context=FeatureContext(e))
    else:
        fld = estimate_derivative(e, target_values(e, name), system, level, basis)
    return model, e, duality_gap(e, target_values(e, name), 1.0, fld)


def _duality_oracle(name, model, n_marks, horizon):
    """E[xi mu((0,T] x Z)] for the built-in targets."""
    if name == "H_T":
        if isinstance(model, CompensatedPoisson):
            return total_intensity(model, n_marks) * horizon
        return None
    if name == "W_T":
        return horizon
    if name == "constant":
        return 0.0
    return None


def run_duality(cfg, report):
    grid = make_grid(cfg)
    level = cfg["dissect.level"]
    two = cfg["derivative.two_ensemble"]
    rows = []
    for name in cfg["derivative.targets"]:
        with stage(report, f"duality {name}", "duality formula"):
            model, e, rec = _duality_once(cfg, name, cfg["paths"], grid, f"duality-{name}", two, level)
            report.within(f"duality {name}: lhs - rhs", rec.gap, 0.0, rec.combined_se)
            expected = _duality_oracle(name, model, e.n_marks, grid.horizon)
            if expected is not None:
                report.within(f"duality {name}: lhs vs closed form", rec.lhs, expected, rec.lhs_se)
            report.values[f"duality[{name}]"] = {"lhs": rec.lhs, "rhs": rec.rhs, "gap": rec.gap,
                                                 "combined_se": rec.combined_se}
            rows.append([name, rec.lhs, rec.rhs, rec.gap, rec.lhs_se, rec.rhs_se, rec.combined_se,
                         int(rec.single_ensemble)])
    report.artifacts.append(Artifact(
        "duality", ["target", "lhs", "rhs", "gap", "lhs_se", "rhs_se", "combined_se",
                    "single_ensemble"], rows))
    reps = cfg["duality.slope_replicates"]
    if reps > 0:
        with stage(report, "gap scaling", "duality formula"):
            _duality_slope(cfg, report, reps)


def _duality_slope(cfg, report, reps):
    """RMS duality gap of H_T over replicates at each path count; log-log slope."""
    steps = cfg["duality.slope_steps"]
    grid = TimeGrid(cfg["grid.horizon"], steps)
    level = min(cfg["dissect.level"], int(np.log2(steps)))
    sizes = list(cfg["duality.slope_paths"])
    rows, rms = [], []
    for n in sizes:
        gaps = []
        for r in range(reps):
            _, _, rec = _duality_once(cfg, "H_T", n, grid, f"slope-{n}-{r}", True, level)
            gaps.append(rec.gap)
            rows.append([n, r, rec.gap, rec.combined_se])
        rms.append(float(np.sqrt(np.mean(np.square(gaps)))))
    slope = float(np.polyfit(np.log(sizes), np.log(rms), 1)[0])
    report.add("duality gap log-log slope in n_paths", slope, -0.5, 0.15, abs(slope + 0.5) <= 0.15)
    report.values["duality_rms_gap"] = {str(n): v for n, v in zip(sizes, rms)}
    report.artifacts.append(Artifact("duality_slope", ["n_paths", "replicate", "gap", "combined_se"], rows))


# -- representation ---------------------------------------------------------------

def run_representation(cfg, report):
    grid = make_grid(cfg)
    marks = MarkSpace.singleton()
    levels = cfg["representation.levels"]
    if any(lv > cfg["dissect.level"] for lv in levels):
        raise ValueError("representation levels exceed dissect.level")
    name = cfg["derivative.targets"][0]
    basis = RegressionBasis(("noise",), cfg["basis.degree"])
    with stage(report, "sample", "martingale random field"):
        e = sample(cfg, Brownian(), marks, "primary")
        f = sample(cfg, Brownian(), marks, "fit") if cfg["derivative.two_ensemble"] else None
        system = build_dissecting_system(grid, marks, cfg["dissect.level"])
    rows, variances = [], []
    for level in levels:
        with stage(report, f"representation level {level}", "representation with the derivative"):
            if f is not None:
                fld = estimate_derivative(f, target_values(f, name), system, level, basis,
                                          eval_context=FeatureContext(e))
            else:
                fld = estimate_derivative(e, target_values(e, name), system, level, basis)
            rec = representation_residual(e, target_values(e, name), fld)
            worst = float(np.max(np.abs(rec.orthogonality_zscores)))
            report.add(f"level {level}: residual vs integral z-scores", worst, 0.0, "max |z| <= 4",
                       worst <= N_SE)
            variances.append(rec.residual_variance)
            rows.append([level, rec.xi0_estimate, rec.residual_variance, rec.target_variance, worst])
    dec = all(b < a for a, b in zip(variances, variances[1:]))
    report.add("residual variance strictly decreasing in level", variances, "decreasing", "strict", dec)
    report.artifacts.append(Artifact(
        "representation", ["level", "xi0", "residual_variance", "target_variance", "max_abs_z"], rows))


# -- models for the adjoint, criticality and optimize kinds -------------------------------

def brownian_square():
    """X = W with an inert control and g(x) = x^2, so K = 2 W_T and DK = 2."""
    n1 = lambda x: np.zeros((x.shape[0], 1))
    sde = ControlledSDESpec(
        0.0, 1, 1,
        drift=lambda ctx, u, x: np.zeros(x.shape[0]),
        jump=lambda ctx, u, x: np.ones((x.shape[0], 1)),
        drift_x=lambda ctx, u, x: np.zeros(x.shape[0]),
        drift_u=lambda ctx, u, x: n1(x),
        jump_x=lambda ctx, u, x: n1(x),
        jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)),
        name="brownian")
    cost = CostSpec.terminal_only(lambda x: x ** 2, lambda x: 2.0 * x, name="x^2")
    return sde, cost


def linear_drift(c):
    """dX = c X dt + dW, X_0 = 1, g(x) = x, so K = 1 and F = c exactly."""
    n1 = lambda x: np.zeros((x.shape[0], 1))
    sde = ControlledSDESpec(
        1.0, 1, 1,
        drift=lambda ctx, u, x: c * x,
        jump=lambda ctx, u, x: np.ones((x.shape[0], 1)),
        drift_x=lambda ctx, u, x: np.full(x.shape[0], c),
        drift_u=lambda ctx, u, x: n1(x),
        jump_x=lambda ctx, u, x: n1(x),
        jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)),
        name=f"linear({c})")
    cost = CostSpec.terminal_only(lambda x: x.copy(), lambda x: np.ones_like(x), name="x")
    return sde, cost


def make_market(cfg):
    utility = Utility.log() if cfg["market.utility"] == "log" else Utility.power(cfg["market.gamma"])
    spec = CreditMarketSpec(rho=tuple(cfg["market.rho"]), intensity=tuple(cfg["market.intensity"]),
                            x0=cfg["market.x0"], utility=utility)
    return build_credit_market(spec)


def analytic_proportions(market):
    """Closed-form optimum under log utility, else None."""
    spec = market.spec
    if spec.utility.name != "log":
        return None
    rho = spec.rho_at(0.0)
    return np.array([analytic_log_optimum(r, d.initial) for r, d in zip(rho, spec.drivers())])


@dataclass
class ModelSetup:
    noise: object
    marks: MarkSpace
    sde: ControlledSDESpec
    cost: CostSpec
    policy: object


def model_setup(cfg, name, theta=None):
    """Noise, dynamics, cost and policy for a named model.

    ``theta`` None selects the natural point: 1.0 for the toy, the analytic
    optimum for the credit market.
    """
    if name == "credit":
        market = make_market(cfg)
        pi = theta if theta is not None else analytic_proportions(market)
        if pi is None:
            raise ValueError("model.theta is required for non-log utilities")
        return ModelSetup(market.noise, market.marks, market.sde, market.cost,
                          proportion_policy(market, pi))
    if name == "brownian-square":
        sde, cost = brownian_square()
        return ModelSetup(Brownian(), MarkSpace.singleton(), sde, cost, ConstantPolicy([0.0], [-1.0], [1.0]))
    sde, cost = quadratic_toy(cfg["model.jump_scale"])
    return ModelSetup(Brownian(), MarkSpace.singleton(), sde, cost, toy_policy(1.0 if theta is None else theta))


def _level(cfg, grid):
    return min(cfg["dissect.level"], int(np.log2(grid.n_steps)))


def _simulate_pair(cfg, setup, grid, label):
    """Primary and independent fitting states for one policy."""
    e = sample(cfg, setup.noise, setup.marks, f"{label}-primary", grid=grid)
    f = sample(cfg, setup.noise, setup.marks, f"{label}-fit", grid=grid)
    return simulate_state(e, setup.sde, setup.policy), simulate_state(f, setup.sde, setup.policy)


def _fd_samples(states, cost, beta, h):
    """Per-path central difference of the cost along beta on common noise."""
    up = simulate_state(states.ensemble, states.sde, controls=states.u + h * beta)
    dn = simulate_state(states.ensemble, states.sde, controls=states.u - h * beta)
    return (performance_samples(up, cost) - performance_samples(dn, cost)) / (2 * h)


# -- adjoint-check ------------------------------------------------------------------------

def run_adjoint_check(cfg, report):
    grid = make_grid(cfg)
    name = cfg["model.name"]
    setup = model_setup(cfg, name, cfg["model.theta"])
    cost = setup.cost
    level = _level(cfg, grid)
    with stage(report, "simulate", "controlled state equation"):
        states, fit_states = _simulate_pair(cfg, setup, grid, "adjoint")
        e = states.ensemble
    with stage(report, "adjoints", "adjoint processes"):
        bundle = compute_adjoints(states, cost, level, fit_states=fit_states)
        gx = cost.terminal_x(states.X_tm[-1])
        report.exact("|K_T - g'(X_T)| max", float(np.max(np.abs(bundle.K_tm[-1] - gx))))
        report.exact("|K_t - K_T| max (no running cost)",
                     float(np.max(np.abs(bundle.K_tm - bundle.K_tm[-1]))))
        if state_derivatives_vanish(states):
            report.exact("|F| max (state derivatives vanish)", float(np.max(np.abs(bundle.F_tm))))
            report.exact("|p - K| max", float(np.max(np.abs(bundle.p_tm - bundle.K_tm))))
            G = first_variation(states, 0)
            report.exact("|G - 1| max", float(np.max(np.abs(G - 1.0))))
        zs = []
        for k in range(grid.n_steps):
            for z in range(e.n_marks):
                rec = anchor_duality(states, bundle.K_tm, bundle.DK, k, z)
                zs.append(abs(rec.gap) / rec.combined_se if rec.combined_se > 0 else 0.0)
        worst = float(np.max(zs))
        report.add("per-anchor duality for the DK field", worst, 0.0, "max |z| <= 4", worst <= N_SE)
        dk = bundle.DK.cell_values
        if name == "brownian-square":
            err = _rel_l2(dk, np.full_like(dk, 2.0))
            report.add("DK of 2 W_T vs 2 (relative L2)", err, 0.0, 0.05, err <= 0.05)
        elif name == "toy":
            c = cfg["model.jump_scale"]
            if c != 0:
                err = _rel_l2(dk, np.full_like(dk, -2.0 * c))
                report.add("DK of -2 X_T vs -2c (relative L2)", err, 0.0, 0.05, err <= 0.05)
        report.values["DK_mean"] = float(dk.mean())
        report.values["single_ensemble"] = bundle.single_ensemble
    with stage(report, "first variation", "first variation process"):
        mid = grid.n_steps // 2
        G = first_variation(states, 0)
        G_mid = first_variation(states, mid)
        gap = float(np.max(np.abs(G[:, -1] - G[:, mid] * G_mid[:, -1])))
        report.exact("G multiplicativity max abs", gap)
    with stage(report, "linear drift adjoint", "adjoint processes"):
        c = 0.5
        lin_sde, lin_cost = linear_drift(c)
        lin = simulate_state(e, lin_sde, controls=np.zeros((e.n_paths, grid.n_steps)))
        lin_b = compute_adjoints(lin, lin_cost, level, with_cov=False)
        report.exact("|F - c| max (linear drift, g(x) = x)", float(np.max(np.abs(lin_b.F_tm - c))))
        G = first_variation(lin, 0)
        closed = (1.0 + c * grid.dt) ** np.arange(grid.n_steps + 1)
        err = float(np.max(np.abs(G[0] - closed) / closed))
        report.add("G vs (1 + c dt)^k (linear drift)", err, 0.0, 1e-12, err <= 1e-12)
    with stage(report, "variation process", "Gateaux derivative via the variation process"):
        margin = float(np.min(setup.policy.margin))
        beta = margin * setup.policy.amount_scale(states.X)[:, :-1, None]
        Y1 = variation_process(states, beta)
        Y2 = variation_process(states, 0.5 * beta)
        report.exact("Y(beta/2) - Y(beta)/2 max abs", float(np.max(np.abs(Y2 - 0.5 * Y1))))
        gd = gateaux_samples(states, cost, beta)
        rows = []
        for h in (1.0, 0.5):
            fd_h = _fd_samples(states, cost, beta, h)
            fd_half = _fd_samples(states, cost, beta, h / 2)
            diff = MeanEstimate.of(gd - fd_half)
            trunc = abs(float(np.mean(fd_h - fd_half)))
            tol = N_SE * diff.std_error + 2.0 * trunc
            report.add(f"Gateaux vs central difference, h={h / 2:g}", diff.value, 0.0,
                       tol, abs(diff.value) <= tol, std_error=diff.std_error)
            rows.append([h / 2, float(gd.mean()), float(fd_half.mean()), diff.value, diff.std_error, trunc])
        report.artifacts.append(Artifact(
            "gateaux", ["h", "gateaux", "central_difference", "difference", "std_error", "truncation"], rows))
    fits = [f for f in bundle.DK.fits if f is not None]
    n_coef = max((f.n_coef for f in fits), default=0)
    report.artifacts.append(Artifact("adjoint_anchors", ["t", "mark"] + [f"coef{i}" for i in range(n_coef)],
                                     list(bundle.export_anchor_rows(grid, setup.marks))))
    report.artifacts.append(Artifact("adjoint_paths", ["path", "t", "K", "F", "p"],
                                     list(bundle.export_path_rows(grid, 20))))


# -- criticality ------------------------------------------------------------------------

def _alpha(kind, states, anchor):
    if kind == "one":
        return np.ones(states.n_paths)
    if kind == "sign":
        run = states.ensemble.running_noise_tm[anchor].sum(axis=1)
        return np.where(run >= 0, 1.0, -1.0)
    raise ValueError(f"unknown alpha {kind!r}")


def consistency_sweep(cfg, report, setup, states, bundle, grad, label):
    """Gateaux derivative vs projected gradient for each anchor, alpha and width."""
    grid = states.ensemble.grid
    rows = []
    margin = float(np.min(setup.policy.margin))
    for anchor in cfg["model.anchors"]:
        anchor = min(anchor, grid.n_steps - max(cfg["model.widths"]))
        for kind in cfg["model.alpha"]:
            alpha = margin * _alpha(kind, states, anchor) * setup.policy.amount_scale(states.X_tm[anchor])
            for width in cfg["model.widths"]:
                rec = theorem_consistency(states, setup.cost, grad, bundle, alpha, anchor, width)
                report.add(f"{label}: Gateaux vs projected gradient (k={anchor}, h={width}dt, "
                           f"alpha={kind})", rec.difference, 0.0, f"{N_SE:g} SE", rec.passed(N_SE),
                           std_error=rec.std_error)
                rows.append([label, anchor, width, kind, rec.gateaux, rec.predicted, rec.difference,
                             rec.std_error])
    return rows


def vanishing_checks(cfg, report, setup, states, grad, label):
    """At an optimum over deterministic controls both sides vanish for deterministic alpha."""
    grid = states.ensemble.grid
    dt = grid.dt
    for anchor in cfg["model.anchors"]:
        anchor = min(anchor, grid.n_steps - max(cfg["model.widths"]))
        for width in cfg["model.widths"]:
            alpha = np.full(states.n_paths, float(np.min(setup.policy.margin)))
            beta = simple_perturbation(states, alpha, anchor, width)
            lhs = MeanEstimate.of(gateaux_samples(states, setup.cost, beta))
            rhs = MeanEstimate.of(alpha * grad.projected.values_tm[anchor][:, 0] * width * dt)
            # the fitted values carry the regression's coefficient noise on top of their spread
            proj = grad.projected
            design = proj.basis.design(proj.context, anchor)
            fit = fit_design(design, grad.raw_tm[anchor][:, 0], with_cov=True)
            rhs_se = float(np.sqrt(rhs.std_error ** 2 + predictive_variance(fit, design, alpha * width * dt)))
            report.within(f"{label}: Gateaux derivative vanishes (k={anchor}, h={width}dt)",
                          lhs.value, 0.0, lhs.std_error)
            report.within(f"{label}: projected gradient term vanishes (k={anchor}, h={width}dt)",
                          rhs.value, 0.0, rhs_se)


def gradient_at(cfg, setup, grid, label):
    level = _level(cfg, grid)
    states, fit_states = _simulate_pair(cfg, setup, grid, label)
    bundle = compute_adjoints(states, setup.cost, level, fit_states=fit_states)
    grad = hamiltonian_gradient(states, setup.cost, bundle)
    project_gradient(grad, projection_basis(states), projection_context(states))
    return states, bundle, grad


def run_criticality(cfg, report):
    grid = make_grid(cfg)
    name = cfg["model.name"]
    if name == "brownian-square":
        raise ValueError("criticality needs a controlled model (toy or credit)")
    setup = model_setup(cfg, name, cfg["model.theta"])
    with stage(report, "gradient and projection", "Hamiltonian gradient and its projection"):
        states, bundle, grad = gradient_at(cfg, setup, grid, name)
        score = criticality_score(grad)
        report.values["criticality_score"] = score.score
        report.values["criticality_std_error"] = score.std_error
        report.values["policy"] = setup.policy.describe()
    with stage(report, "consistency sweep", "Gateaux derivative and projected gradient agree"):
        rows = consistency_sweep(cfg, report, setup, states, bundle, grad, name)
    with stage(report, "criticality verdict", "critical point condition"):
        if name == "toy":
            th = float(setup.policy.theta[0])
            t = grid.edges[:-1]
            oracle = -2.0 * (states.X_tm[:-1] + th * (grid.horizon - t)[:, None])
            proj = grad.projected.values_tm[:, :, 0]
            err = _rel_l2(proj, oracle)
            report.add("toy: projected gradient vs -2(X_t + u(T-t)) (relative L2)", err, 0.0, 0.05,
                       err <= 0.05)
            if th == 0.0:
                vanishing_checks(cfg, report, setup, states, grad, name)
            else:
                report.add("toy: criticality score above 10 SE", score.score, 0.0, "> 10 SE",
                           score.score > 10 * score.std_error, std_error=score.std_error)
    report.artifacts.append(Artifact(
        "consistency", ["model", "anchor", "width", "alpha", "gateaux", "predicted", "difference",
                        "std_error"], rows))
    report.artifacts.append(Artifact("score_profile", ["t", "mean_sq_projected_gradient"],
                                     [[grid.edges[k], v] for k, v in enumerate(score.profile)]))


# -- optimize -------------------------------------------------------------------------

def optimizer_config(cfg, level):
    return OptimizerConfig(max_iter=cfg["optimizer.max_iter"], step0=cfg["optimizer.step0"],
                           decay=cfg["optimizer.decay"], refit_period=cfg["optimizer.refit_period"],
                           tolerance=cfg["optimizer.tolerance"],
                           theta_tolerance=cfg["optimizer.theta_tolerance"], level=level)


def _trace_artifact(name, trace, n_params):
    return Artifact(name, ["iter"] + [f"theta{i}" for i in range(n_params)] + ["J_estimate", "score", "step"],
                    list(trace.rows()))


def run_optimize(cfg, report):
    grid = make_grid(cfg)
    name = cfg["model.name"]
    if name == "brownian-square":
        raise ValueError("optimize needs a controlled model (toy or credit)")
    start = cfg["optimizer.start"]
    setup = model_setup(cfg, name, start if name == "credit" else start[0])
    with stage(report, "optimize", "gradient ascent towards the critical point condition"):
        e = sample(cfg, setup.noise, setup.marks, "primary", grid=grid)
        f = sample(cfg, setup.noise, setup.marks, "fit", grid=grid)
        best, trace = optimize_policy(e, setup.sde, setup.cost, setup.policy,
                                      optimizer_config(cfg, _level(cfg, grid)), fit_ensemble=f)
    theta = best.theta
    if name == "credit":
        target, tol = analytic_proportions(make_market(cfg)), 0.02
    else:
        target, tol = np.zeros_like(theta), 0.01
    if target is not None:
        gap = float(np.max(np.abs(theta - target)))
        report.add("optimizer estimate vs closed-form optimum", theta, target, tol, gap <= tol)
        report.values["gap"] = gap
    report.values["theta"] = theta
    report.values["termination"] = trace.termination
    report.values["iterations"] = len(trace.entries)
    report.artifacts.append(_trace_artifact("trace", trace, theta.size))
    report.texts["policy.json"] = json.dumps(_plain(best.describe()), indent=2, sort_keys=True) + "\n"


# -- credit-benchmark -------------------------------------------------------------------

def run_credit_benchmark(cfg, report):
    grid = make_grid(cfg)
    market = make_market(cfg)
    if market.spec.n_assets != 1:
        raise ValueError("the credit benchmark uses a single asset")
    analytic = analytic_proportions(market)
    level = _level(cfg, grid)
    with stage(report, "sample", "doubly stochastic Poisson noise"):
        e = sample(cfg, market.noise, market.marks, "primary", grid=grid)
        f = sample(cfg, market.noise, market.marks, "fit", grid=grid)
    with stage(report, "optimize", "gradient ascent towards the critical point condition"):
        starts = [float(s) for s in cfg["credit.starts"]]
        main = float(cfg["optimizer.start"][0])
        finals = {}
        for s in starts + ([main] if main not in starts else []):
            pol, trace = optimize_policy(e, market.sde, market.cost, proportion_policy(market, s),
                                         optimizer_config(cfg, level), fit_ensemble=f)
            finals[s] = float(pol.theta[0])
            report.artifacts.append(_trace_artifact(f"trace_start_{s:g}", trace, 1))
        estimate = finals[main]
        spread = max(finals[s] for s in starts) - min(finals[s] for s in starts)
        report.add("multi-start spread of the optimizer", spread, 0.0, 0.02, spread <= 0.02)
        report.values["pi_estimate"] = estimate
        report.values["pi_starts"] = [finals[s] for s in starts]
        ref = estimate
        if analytic is not None:
            ref = float(analytic[0])
            gap = abs(estimate - ref)
            report.add("optimizer proportion vs analytic optimum", estimate, ref, 0.02, gap <= 0.02)
            report.values["pi_analytic"] = ref
            report.values["pi_gap"] = gap
    step = cfg["credit.grid_step"]
    pis = np.round(np.arange(int(round(1.0 / step))) * step, 12)
    with stage(report, "proportion grid", "strict concavity and a unique critical point"):
        points, values = proportion_grid(e, market, pis)
        J = np.array([p.J for p in points])
        best = float(pis[int(np.argmax(J))])
        report.add("grid argmax of J vs optimum", best, ref, step, abs(best - ref) <= step + 1e-12)
        worst = np.inf
        for i in range(1, len(pis) - 1):
            mid = MeanEstimate.of(values[i] - 0.5 * (values[i - 1] + values[i + 1]))
            worst = min(worst, mid.value + N_SE * mid.std_error)
        report.add("midpoint concavity on the grid (min of mean + 4 SE)", worst, ">= 0", "4 SE", worst >= 0)
        around, vals = proportion_grid(e, market, [ref - 0.05, ref, ref + 0.05])
        for side, j in (("-0.05", 0), ("+0.05", 2)):
            d = MeanEstimate.of(vals[j] - vals[1])
            report.add(f"J(optimum {side}) - J(optimum) <= 0", d.value, 0.0, "4 SE",
                       d.value <= N_SE * d.std_error, std_error=d.std_error)
        report.values["pi_grid_argmax"] = best
    with stage(report, "corollary residual", "first-order condition of the credit problem"):
        rsteps = cfg["credit.residual_steps"]
        rgrid = TimeGrid(grid.horizon, rsteps)
        rlevel = level + int(round(np.log2(rsteps / grid.n_steps)))
        e2 = sample(cfg, market.noise, market.marks, "residual-primary", grid=rgrid)
        f2 = sample(cfg, market.noise, market.marks, "residual-fit", grid=rgrid)

        def residual(pi):
            pol = proportion_policy(market, pi)
            s = simulate_state(e2, market.sde, pol)
            b = compute_adjoints(s, market.cost, rlevel, fit_states=simulate_state(f2, market.sde, pol))
            return corollary_residual(s, market, b)

        at_opt = residual(ref)
        report.within("corollary residual at the optimum", at_opt.aggregate, 0.0, at_opt.std_error)
        far = cfg["credit.far_proportion"]
        at_far = residual(far)
        report.add(f"corollary residual at pi={far:g} above 10 SE", at_far.zscore(), "> 10", "10 SE",
                   at_far.zscore() > 10, std_error=at_far.std_error)
        coarse = [float(c) for c in cfg["credit.residual_grid"]]
        res = [residual(c) for c in coarse]
        cpoints, _ = proportion_grid(e2, market, coarse)
        arg_res = coarse[int(np.argmin([abs(r.aggregate) for r in res]))]
        arg_J = coarse[int(np.argmax([p.J for p in cpoints]))]
        spacing = float(np.max(np.diff(coarse))) if len(coarse) > 1 else 0.0
        agree = arg_res == arg_J and abs(arg_res - ref) <= spacing
        report.add("residual argmin equals J argmax on the coarse grid", arg_res, arg_J,
                   f"equal, within {spacing:g} of optimum", agree)
        report.values["residual_at_optimum"] = {"aggregate": at_opt.aggregate, "std_error": at_opt.std_error}
        report.values["residual_far"] = {"aggregate": at_far.aggregate, "std_error": at_far.std_error}
        far_J = estimate_performance(e2, market, proportion_policy(market, far))
        rows = [[p.pi[0], p.J, p.std_error, "", ""] for p in points]
        rows += [[c, p.J, p.std_error, r.aggregate, r.std_error] for c, p, r in zip(coarse, cpoints, res)]
        rows.append([far, far_J.J, far_J.std_error, at_far.aggregate, at_far.std_error])
        report.artifacts.append(Artifact("pi_grid", ["pi", "J", "J_se", "residual", "residual_se"], rows))


RUNNERS = {
    "validate-noise": run_validate_noise,
    "dissect-check": run_dissect_check,
    "derivative-oracle": run_derivative_oracle,
    "duality": run_duality,
    "representation": run_representation,
    "adjoint-check": run_adjoint_check,
    "criticality": run_criticality,
    "optimize": run_optimize,
    "credit-benchmark": run_credit_benchmark,
}


def run_experiment(config):
    """Run the pipeline for ``config.kind`` and return its report."""
    report = RunReport(config)
    t0 = time.perf_counter()
    RUNNERS[config.kind](config, report)
    report.wall_clock = time.perf_counter() - t0
    return report


# -- persistence ----------------------------------------------------------------------

def format_table(report):
    """Fixed-width table of the checks in insertion order."""
    head = ["check", "value", "expected", "tolerance", "std_error", "result"]
    rows = []
    for c in report.checks:
        se = "exact" if c.exact else ("" if c.std_error is None else f"{c.std_error:.4g}")
        rows.append([c.name, _fmt(c.value), _fmt(c.expected), _fmt(c.tolerance), se,
                     "PASS" if c.passed else "FAIL"])
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]

    def line(r):
        return "  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()

    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(x) for x in np.ravel(np.asarray(v, dtype=object))) + "]"
    return str(v)


def write_report(report, directory):
    """Write summary.json, report.txt, artifacts and small ensembles; return written paths."""
    os.makedirs(directory, exist_ok=True)
    written = []
    summary = os.path.join(directory, "summary.json")
    with open(summary, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    written.append(summary)
    cfg = report.config
    n_fail = sum(not c.passed for c in report.checks)
    txt = os.path.join(directory, "report.txt")
    with open(txt, "w") as fh:
        fh.write(f"kind: {cfg.kind if cfg else '-'}\nseed: {cfg.seed if cfg else '-'}\n")
        fh.write(f"wall clock: {report.wall_clock:.2f} s\n")
        fh.write(f"result: {'PASS' if report.passed else 'FAIL'} "
                 f"({len(report.checks) - n_fail}/{len(report.checks)} checks passed)\n\n")
        fh.write("stages:\n")
        for s in report.stages:
            fh.write(f"  {s['stage']}  [{s['anchor']}]\n")
        fh.write("\n" + format_table(report) + "\n")
        if cfg is not None:
            fh.write("\nconfig:\n" + serialize_config(cfg))
    written.append(txt)
    if report.artifacts or report.texts:
        os.makedirs(os.path.join(directory, "artifacts"), exist_ok=True)
    for a in report.artifacts:
        path = os.path.join(directory, "artifacts", f"{a.name}.csv")
        write_csv(path, a.header, a.rows)
        written.append(path)
    for name, text in report.texts.items():
        path = os.path.join(directory, "artifacts", name)
        with open(path, "w") as fh:
            fh.write(text)
        written.append(path)
    for name, e in report.ensembles.items():
        if _saveable(e):
            os.makedirs(os.path.join(directory, "ensembles"), exist_ok=True)
            path = os.path.join(directory, "ensembles", f"{name}.bin")
            save_ensemble(e, path)
            written.append(path)
    return written

"""Acceptance criteria 1-9 at their stated path counts and tolerances.

Each test records one pass/fail line, printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from smpjump.config import KINDS, build_config
from smpjump.derivative import estimate_derivative
from smpjump.dissecting import build_dissecting_system
from smpjump.experiments import run_experiment, write_report
from smpjump.adjoint import compute_adjoints
from smpjump.maxprinciple import (conditional_projection, hamiltonian_gradient, project_gradient,
                                  projection_basis, projection_context)
from smpjump.noise import CompensatedPoisson, MarkSpace, TimeGrid, sample_ensemble
from smpjump.state import simulate_state
from smpjump.toys import quadratic_toy, toy_policy

pytestmark = pytest.mark.slow


def run(kind, seed=1, **values):
    cfg = build_config({"kind": kind, "seed": seed, **{k.replace("__", "."): v for k, v in values.items()}})
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start


def failures(report):
    return [c.name for c in report.checks if not c.passed]


def test_criterion_1_isometry(record_criterion):
    poisson, t_p = run("validate-noise", noise__kind="poisson", noise__intensity=[2.0])
    brownian, t_b = run("validate-noise", noise__kind="brownian")
    sq_p = poisson.check("E[mu((0,T] x Z)^2] vs lambda T")
    sq_b = brownian.check("E[mu((0,T])^2] vs T")
    ok = (poisson.passed and brownian.passed and sq_p.expected == 2.0 and sq_b.expected == 1.0
          and t_p < 10 and t_b < 10)
    record_criterion(1, "isometry, 1e5 paths, < 10 s each", ok)
    assert ok, (failures(poisson), failures(brownian), t_p, t_b)


def test_criterion_2_field_axioms(record_criterion):
    within = total = 0
    exact = True
    for seed in range(1, 21):
        kind = ("brownian", "poisson", "cox")[seed % 3]
        extra = {"noise__volatility": 0.5, "noise__marks": 2, "noise__intensity": [1.0, 0.5]} if kind == "cox" else {}
        report, _ = run("validate-noise", seed=seed, paths=20_000, noise__kind=kind, **extra)
        n = report.values["n_zscores"]
        within += round(report.check("fraction of z-scores within 4").value * n)
        total += n
        exact &= report.check("additivity max residual").value == 0.0
    fraction = within / total
    ok = fraction >= 0.99 and exact
    record_criterion(2, f"field axioms over 20 seeds, {fraction:.4f} of {total} z-scores within 4", ok)
    assert ok


def test_criterion_3_derivative_oracles(record_criterion):
    report, _ = run("derivative-oracle")
    names = [c.name for c in report.checks]
    assert any("W_T vs 1" in n for n in names) and any("2 W_t" in n for n in names)
    assert any("H_T^2" in n for n in names) and any("enumeration" in n for n in names)
    record_criterion(3, "derivative oracles and brute-force cross-checks", report.passed)
    assert report.passed, failures(report)


def test_criterion_4_duality(record_criterion):
    report, _ = run("duality", duality__slope_replicates=8)
    slope = report.check("duality gap log-log slope in n_paths")
    ok = report.passed and slope.passed
    record_criterion(4, f"duality at 1e5 paths, gap slope {slope.value:.3f}", ok)
    assert ok, failures(report)


def test_criterion_5_representation(record_criterion):
    report, _ = run("representation", representation__levels=[2, 3, 4])
    record_criterion(5, "representation residual decreasing over levels 2, 3, 4", report.passed)
    assert report.passed, failures(report)


def test_criterion_6_exact_invariants(record_criterion):
    report, _ = run("adjoint-check")
    g = report.check("G multiplicativity max abs")
    y = report.check("Y(beta/2) - Y(beta)/2 max abs")
    ok = report.passed and g.exact and g.value == 0.0 and y.exact and y.value == 0.0

    grid = TimeGrid(1.0, 16)
    e = sample_ensemble(CompensatedPoisson(2.0), grid, MarkSpace.singleton(), 20_000, 7)
    system = build_dissecting_system(grid, e.marks, 3)
    xi = e.terminal_noise() ** 2
    base = estimate_derivative(e, xi, system, 3).cell_values
    for scale in (2.0, 0.25, -1.0, -8.0):
        ok &= np.array_equal(estimate_derivative(e, scale * xi, system, 3).cell_values, scale * base)

    fit = sample_ensemble(CompensatedPoisson(2.0), grid, MarkSpace.singleton(), 20_000, 8)
    sde, cost = quadratic_toy(0.5)
    states = simulate_state(e, sde, toy_policy(1.0))
    bundle = compute_adjoints(states, cost, 3, fit_states=simulate_state(fit, sde, toy_policy(1.0)))
    grad = project_gradient(hamiltonian_gradient(states, cost, bundle), projection_basis(states),
                            projection_context(states))
    proj = grad.projected
    again = conditional_projection(proj, proj.basis, proj.context)
    ok &= np.array_equal(again.values_tm, proj.values_tm)
    record_criterion(6, "bit-exact linearity, multiplicativity and idempotence", ok)
    assert ok, failures(report)


def test_criterion_7_gradient_consistency(record_criterion):
    reports = {"toy at theta 1": run("criticality")[0],
               "toy optimum": run("criticality", model__theta=0.0)[0],
               "credit at optimum": run("criticality", model__name="credit", grid__horizon=5.0)[0]}
    ok = all(r.passed for r in reports.values())
    vanish = [c for c in reports["toy optimum"].checks if "vanishes" in c.name]
    ok &= len(vanish) > 0
    record_criterion(7, "Gateaux derivative vs projected gradient, toy and credit", ok)
    assert ok, {k: failures(r) for k, r in reports.items()}


def test_criterion_8_credit_benchmark(record_criterion):
    report, seconds = run("credit-benchmark")
    ok = report.passed and seconds < 300
    record_criterion(8, f"credit benchmark in {seconds:.0f} s", ok)
    assert ok, (failures(report), seconds)


def test_criterion_9_determinism(record_criterion, tmp_path):
    small = {"credit-benchmark": {"paths": 4000, "credit.starts": [0.5]}}
    ok = True
    for kind in KINDS:
        values = {"kind": kind, "seed": 3, "paths": 4000, **small.get(kind, {})}
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / kind / rep
            write_report(run_experiment(build_config(values)), str(out))
            blobs.append((out / "summary.json").read_bytes())
        ok &= blobs[0] == blobs[1]
    record_criterion(9, "byte-identical summary JSON on rerun for every kind", ok)
    assert ok

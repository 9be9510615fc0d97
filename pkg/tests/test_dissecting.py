import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpjump.dissecting import build_dissecting_system, verify_system
from smpjump.noise import MarkSpace, TimeGrid


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(1, 3), st.sampled_from([0.5, 1.0, 3.0]))
def test_levels_partition_and_nest(max_level, n_marks, horizon):
    grid = TimeGrid(horizon, 2 ** max_level * 2)
    system = build_dissecting_system(grid, MarkSpace.numbered(n_marks), max_level)
    for n in range(max_level + 1):
        cells = system.cells(n)
        assert len(cells) == 2 ** n * n_marks
        hits = np.zeros((grid.n_steps, n_marks), dtype=int)
        for c in cells:
            hits[c.start:c.stop, list(c.marks)] += 1
        assert np.all(hits == 1)
        assert system.mesh(n) == horizon / 2 ** n
        assert system.mesh(n) < system.mesh_bound(n)
        if n:
            for i, c in enumerate(cells):
                p = system.cells(n - 1)[system.parent(n, i)]
                assert p.start <= c.start and c.stop <= p.stop and p.marks == c.marks


def test_invalid_systems():
    grid = TimeGrid(1.0, 12)
    with pytest.raises(ValueError):
        build_dissecting_system(grid, MarkSpace.singleton(), 3)
    with pytest.raises(ValueError):
        build_dissecting_system(grid, MarkSpace.singleton(), -1)
    system = build_dissecting_system(grid, MarkSpace.singleton(), 2)
    with pytest.raises(ValueError):
        system.cells(3)
    with pytest.raises(ValueError):
        system.parent(0, 0)


def test_verify_on_poisson(poisson16):
    system = build_dissecting_system(poisson16.grid, poisson16.marks, 4)
    out = verify_system(system, poisson16)
    assert out["exact_relations"] and out["variance_decreasing"] and out["mesh_decreasing"]
    # variance of one cell is lambda * |cell|
    for lv in out["levels"]:
        assert lv["max_variance"] == pytest.approx(2.0 / 2 ** lv["level"], rel=0.1)


def test_verify_rejects_misaligned_grid(poisson16):
    system = build_dissecting_system(TimeGrid(2.0, 16), poisson16.marks, 2)
    with pytest.raises(ValueError):
        verify_system(system, poisson16)


def test_dump_lists_every_cell():
    system = build_dissecting_system(TimeGrid(1.0, 4), MarkSpace.numbered(2), 2)
    lines = system.dump().splitlines()
    assert lines[0] == "level k t_a t_b mark"
    assert len(lines) == 1 + 2 * (1 + 2 + 4)

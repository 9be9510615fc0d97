"""Nested dyadic partitions of [0, T] x marks."""

from dataclasses import dataclass

import numpy as np

from .noise import Cell


@dataclass(frozen=True)
class DissectingSystem:
    """Levels 0..max_level; level n has 2**n time cells per mark.

    Cells of a level are ordered time-major then by mark.  The mesh bound of
    level n is T * 2**-n and every level covers the whole space.
    """

    grid: object
    marks: object
    levels: tuple
    parents: tuple

    @property
    def max_level(self):
        return len(self.levels) - 1

    def cells(self, level):
        self._check_level(level)
        return self.levels[level]

    def steps_per_cell(self, level):
        self._check_level(level)
        return self.grid.n_steps >> level

    def mesh(self, level):
        return self.grid.horizon / 2 ** level

    def mesh_bound(self, level):
        # strict bound: the realized mesh equals T 2^-n, so use T 2^-(n-1)
        return self.grid.horizon * 2.0 ** (1 - level)

    def parent(self, level, index):
        """Index of the level-(level-1) cell containing cell ``index``."""
        if level < 1:
            raise ValueError("level 0 cells have no parent")
        return self.parents[level][index]

    def _check_level(self, level):
        if not 0 <= level <= self.max_level:
            raise ValueError(f"level {level} outside 0..{self.max_level}")

    def dump(self):
        """Text listing of every cell: level, k, t_a, t_b, mark."""
        lines = ["level k t_a t_b mark"]
        edges = self.grid.edges
        for n, cells in enumerate(self.levels):
            for k, c in enumerate(cells):
                lines.append(f"{n} {k} {edges[c.start]!r} {edges[c.stop]!r} {self.marks.labels[c.marks[0]]}")
        return "\n".join(lines) + "\n"


def build_dissecting_system(grid, marks, max_level):
    max_level = int(max_level)
    if max_level < 0:
        raise ValueError("max_level must be non-negative")
    if grid.n_steps % (2 ** max_level):
        raise ValueError(f"{grid.n_steps} steps cannot be split into 2^{max_level} dyadic cells")
    m = len(marks)
    levels, parents = [], [()]
    for n in range(max_level + 1):
        width = grid.n_steps >> n
        levels.append(tuple(Cell(j * width, (j + 1) * width, (z,))
                            for j in range(2 ** n) for z in range(m)))
        if n:
            parents.append(tuple((j // 2) * m + z for j in range(2 ** n) for z in range(m)))
    return DissectingSystem(grid, marks, tuple(levels), tuple(parents))


def _covers_exactly(cells, n_steps, n_marks):
    hits = np.zeros((n_steps, n_marks), dtype=np.int64)
    for c in cells:
        hits[c.start:c.stop, list(c.marks)] += 1
    return bool(np.all(hits == 1))


def verify_system(system, ensemble):
    """Exact set-relation checks plus empirical variance bounds per level."""
    if ensemble.grid != system.grid or len(ensemble.marks) != len(system.marks):
        raise ValueError("dissecting system is not aligned with the ensemble grid")
    K, m = system.grid.n_steps, len(system.marks)
    levels = []
    for n, cells in enumerate(system.levels):
        partition = _covers_exactly(cells, K, m)
        single = all(len(c.marks) == 1 for c in cells)
        nested = True
        if n:
            for i, c in enumerate(cells):
                p = system.levels[n - 1][system.parents[n][i]]
                nested &= p.start <= c.start and c.stop <= p.stop and set(c.marks) <= set(p.marks)
        variances = [float(np.mean(ensemble.cell_increment(c) ** 2)) for c in cells]
        mesh = max(system.grid.edges[c.stop] - system.grid.edges[c.start] for c in cells)
        levels.append({"level": n, "n_cells": len(cells), "disjoint_union": partition,
                       "single_mark": single, "nested": bool(nested), "mesh": float(mesh),
                       "mesh_below_bound": bool(mesh < system.mesh_bound(n)),
                       "max_variance": max(variances)})
    maxv = [lv["max_variance"] for lv in levels]
    meshes = [lv["mesh"] for lv in levels]
    return {"levels": levels,
            "variance_decreasing": all(b < a for a, b in zip(maxv, maxv[1:])),
            "mesh_decreasing": all(b < a for a, b in zip(meshes, meshes[1:])),
            "exact_relations": all(lv["disjoint_union"] and lv["single_mark"] and lv["nested"]
                                   for lv in levels)}

"""Brute-force reference values for the derivative estimator.

Two exact references are provided: a symmetric binomial tree of Brownian
increments, enumerated path by path, and Poisson increments enumerated with
counts truncated at a fixed maximum.
"""

import numpy as np
from scipy.stats import poisson

from .noise import MarkSpace, PathEnsemble, TimeGrid


def binomial_tree(n_steps=10, horizon=1.0):
    """All 2**n_steps equally likely +-sqrt(dt) paths as an ensemble."""
    grid = TimeGrid(horizon, n_steps)
    codes = np.arange(2 ** n_steps)
    bits = (codes[:, None] >> np.arange(n_steps - 1, -1, -1)) & 1
    inc = np.where(bits == 1, 1.0, -1.0) * np.sqrt(grid.dt)
    return PathEnsemble.from_arrays(grid, MarkSpace.singleton(), inc, 1.0, label="binomial-tree")


def tree_conditional(tree, xi, start, stop):
    """Exact E[xi * mu((start, stop]) / Lambda | path prefix up to start].

    Paths are enumerated with the first step as the most significant bit, so
    paths sharing a prefix of length ``start`` form contiguous groups.
    """
    n = tree.n_paths
    mu = tree.increments[:, start:stop, 0].sum(axis=1)
    lam = tree.dt * (stop - start)
    ratio = np.asarray(xi) * mu / lam
    groups = ratio.reshape(2 ** start, n // 2 ** start)
    return np.repeat(groups.mean(axis=1), n // 2 ** start)


def poisson_conditional(xi_of_count, lam, horizon, t_a, t_b, h_values, max_count=30):
    """Exact E[xi(H_T) * mu(cell) / Lambda(cell) | H_{t_a} = h] by enumeration.

    ``xi_of_count`` maps terminal counts (array) to target values; counts in
    the cell and after it are each truncated at ``max_count``.
    """
    m_cell = lam * (t_b - t_a)
    m_rest = lam * (horizon - t_b)
    n = np.arange(max_count + 1)
    p_cell = poisson.pmf(n, m_cell)
    p_rest = poisson.pmf(n, m_rest) if m_rest > 0 else (n == 0).astype(float)
    out = []
    for h in np.atleast_1d(h_values):
        total = h + n[:, None] + n[None, :]
        weight = p_cell[:, None] * p_rest[None, :]
        mu = (n - m_cell)[:, None]
        out.append(float(np.sum(weight * xi_of_count(total) * mu) / m_cell))
    return np.array(out)

"""Numerical stochastic maximum principle for jump-driven control problems."""

__version__ = "0.1.0"

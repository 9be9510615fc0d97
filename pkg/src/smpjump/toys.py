"""Linear-quadratic toy problem with a closed-form solution.

dX = u dt + c dW, X_0 = 0, J(u) = E[-X_T^2].  For constant u the optimum is
u = 0, and E[-2 X_T | F_t] = -2 (X_t + u (T - t)).
"""

import numpy as np

from .state import ConstantPolicy, ControlledSDESpec, CostSpec


def quadratic_toy(jump_scale=0.0, x0=0.0):
    c = float(jump_scale)
    sde = ControlledSDESpec(
        x0=x0, n_controls=1, n_marks=1,
        drift=lambda ctx, u, x: u[:, 0].copy(),
        jump=lambda ctx, u, x: np.full((x.shape[0], 1), c),
        drift_x=lambda ctx, u, x: np.zeros(x.shape[0]),
        drift_u=lambda ctx, u, x: np.ones((x.shape[0], 1)),
        jump_x=lambda ctx, u, x: np.zeros((x.shape[0], 1)),
        jump_u=lambda ctx, u, x: np.zeros((x.shape[0], 1, 1)),
        name=f"quadratic-toy(c={c})")
    cost = CostSpec.terminal_only(lambda x: -x ** 2, lambda x: -2.0 * x, name="-x^2")
    return sde, cost


def toy_policy(theta=1.0, bound=2.0):
    return ConstantPolicy([theta], [-bound], [bound])

"""Over-parameterised 5->4 map built from the Sobol g-function, and its ridge."""
from __future__ import annotations

import numpy as np

from nofas.autodiff import Tensor

SOBOL_A = np.array([0.084, 0.229, 0.913, 0.152, 0.826])
MIX = np.array([
    [1, 1, 0, 0, 0],
    [0, 1, 1, 0, 0],
    [0, 0, 1, 1, 0],
    [0, 0, 0, 1, 1],
], dtype=np.float64) / np.sqrt(2.0)
RIDGE_DIRECTION = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
SOBOL_Z_STAR = np.array([2.75, -1.5, 0.25, -2.5, 1.75])

# g_i(r) = (c_i + r) / (1 + r) ranges over (1, c_i]
_C = 2.0 * np.abs(2.0 * SOBOL_A - 1.0)


def sobol_g(r):
    return (_C + r) / (1.0 + r)


def sobol_g_inverse(y):
    return (_C - y) / (y - 1.0)


def sobol_eval(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return sobol_g(np.exp(z)) @ MIX.T


def sobol_eval_tensor(z: Tensor) -> Tensor:
    r = z.exp()
    return ((r + _C) / (r + 1.0)) @ MIX.T


def ridge_interval(z_star=SOBOL_Z_STAR, v=RIDGE_DIRECTION) -> tuple[float, float]:
    """Open interval of ``t`` for which ``g(z*) + v t`` stays inside the range of g."""
    g = sobol_g(np.exp(z_star))
    a = (1.0 - g) / v
    b = (_C - g) / v
    return float(np.max(np.minimum(a, b))), float(np.min(np.maximum(a, b)))


def sobol_ridge(t, z_star=SOBOL_Z_STAR) -> np.ndarray:
    """Point(s) ``log g^{-1}(g(z*) + v t)`` on the level set through ``z*``."""
    t = np.asarray(t, dtype=np.float64)
    lo, hi = ridge_interval(z_star)
    if np.any(t <= lo) or np.any(t >= hi):
        raise ValueError(f"t outside the admissible interval ({lo:.5f}, {hi:.5f})")
    y = sobol_g(np.exp(z_star)) + np.multiply.outer(t, RIDGE_DIRECTION)
    return np.log(sobol_g_inverse(y))


def ridge_curve(z2_values, z_star=SOBOL_Z_STAR) -> np.ndarray:
    """Ridge points parameterised by their second coordinate (monotone along the ridge).

    Covers the whole curve, including the parts near the interval ends where
    ``t`` barely moves but ``z_2`` runs off to infinity.
    """
    g2_star = sobol_g(np.exp(z_star))[1]
    r2 = np.exp(np.asarray(z2_values, dtype=np.float64))
    g2 = (_C[1] + r2) / (1.0 + r2)
    return sobol_ridge((g2 - g2_star) / RIDGE_DIRECTION[1], z_star)

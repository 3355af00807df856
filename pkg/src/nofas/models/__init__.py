"""Benchmark forward models ``f: Z -> X`` evaluated in latent coordinates.

Each :class:`ForwardModel` owns its latent<->physical map, a latent prior box
(also used for the pre-grid), the true parameters and an observation-noise
recipe.  ``evaluate`` always takes latent inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from nofas.autodiff import Tensor
from nofas.models.circuits import (
    CAPACITANCE_BOUNDS,
    RESISTANCE_BOUNDS,
    RCCircuit,
    RCRCircuit,
    Waveform,
    load_waveform,
    rk4_integrate,
)
from nofas.models.sobol import SOBOL_Z_STAR, sobol_eval, sobol_eval_tensor, sobol_ridge

MODEL_NAMES = ("closed_form", "rc", "rcr", "sobol")


class DomainError(ValueError):
    """Latent point too far outside the transform's box (flow divergence)."""


def closed_form_eval(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    a = z[..., 0] ** 3 / 10.0
    b = np.exp(z[..., 1] / 3.0)
    return np.stack([a + b, a - b], axis=-1)


def closed_form_eval_tensor(z: Tensor) -> Tensor:
    z1, z2 = z[:, 0:1], z[:, 1:2]
    from nofas import autodiff as ad
    a = z1 * z1 * z1 * 0.1
    b = (z2 * (1.0 / 3.0)).exp()
    return ad.concat([a + b, a - b], axis=1)


# --- observation noise ------------------------------------------------------

@dataclass(frozen=True)
class NoiseRecipe:
    """Independent Gaussian noise with std ``relative*|x*| + absolute``."""

    relative: float = 0.0
    absolute: tuple[float, ...] | None = None

    def std(self, x_star) -> np.ndarray:
        x_star = np.asarray(x_star, dtype=np.float64)
        s = self.relative * np.abs(x_star)
        if self.absolute is not None:
            s = s + np.asarray(self.absolute)
        return s


RECIPES = {
    "closed_form": NoiseRecipe(0.05),
    "rc": NoiseRecipe(0.05),
    "rcr": NoiseRecipe(0.05),
    "sobol": NoiseRecipe(0.01),
    "none": NoiseRecipe(0.0),
}


def get_recipe(recipe) -> NoiseRecipe:
    if isinstance(recipe, NoiseRecipe):
        return recipe
    try:
        return RECIPES[recipe]
    except KeyError:
        raise ValueError(f"unknown noise recipe {recipe!r}; known: {sorted(RECIPES)}") from None


def make_observations(x_star, recipe, n: int, seed: int | np.random.Generator = 0) -> np.ndarray:
    """``n`` i.i.d. rows ``x* + std * N(0, I)``."""
    if n < 1:
        raise ValueError(f"need n >= 1 observations, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_star = np.asarray(x_star, dtype=np.float64)
    std = get_recipe(recipe).std(x_star)
    return x_star + std * rng.standard_normal((n, x_star.size))


# --- latent transforms --------------------------------------------------------

@dataclass(frozen=True)
class BoxTransform:
    """Per-coordinate map from latent ``[-3, 3]`` onto a physical box.

    Coordinates flagged ``log_scale`` are affine in ``log`` of the physical
    value.  Between 3 and 5 in absolute value the latent point is clamped to
    the box edge; beyond 5 a :class:`DomainError` is raised.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    log_scale: tuple[bool, ...]
    half_width: float = 3.0
    hard_limit: float = 5.0

    def _ends(self):
        lo, hi = np.array(self.lower), np.array(self.upper)
        ls = np.array(self.log_scale)
        lo[ls], hi[ls] = np.log(lo[ls]), np.log(hi[ls])
        return lo, hi, ls

    def to_physical(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if np.any(np.abs(u) > self.hard_limit):
            raise DomainError(f"latent value beyond +-{self.hard_limit}: max |u| = {np.abs(u).max():.4g}")
        a, b, ls = self._ends()
        w = self.half_width
        s = a + (np.clip(u, -w, w) + w) / (2 * w) * (b - a)
        s[..., ls] = np.exp(s[..., ls])
        return s

    def to_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        a, b, ls = self._ends()
        s = z.copy()
        s[..., ls] = np.log(s[..., ls])
        w = self.half_width
        return (s - a) / (b - a) * 2 * w - w


class IdentityTransform:
    def to_physical(self, u) -> np.ndarray:
        return np.asarray(u, dtype=np.float64)

    def to_latent(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)


def latent_transform(model: ForwardModel, u) -> np.ndarray:
    return model.transform.to_physical(u)


# --- models ---------------------------------------------------------------------

@dataclass
class ForwardModel:
    name: str
    dim: int
    out_dim: int
    physical_fn: Callable[[np.ndarray], np.ndarray]
    transform: object
    true_params: np.ndarray
    box: np.ndarray                       # latent prior box / pre-grid bounds, shape (d, 2)
    recipe: NoiseRecipe
    param_names: tuple[str, ...]
    output_names: tuple[str, ...]
    tensor_fn: Callable[[Tensor], Tensor] | None = None

    @property
    def z_star(self) -> np.ndarray:
        """True parameters in latent coordinates."""
        return self.transform.to_latent(self.true_params)

    @property
    def x_star(self) -> np.ndarray:
        return self.evaluate(self.z_star[None, :])[0]

    def evaluate(self, u) -> np.ndarray:
        """True model on a batch of latent points, shape ``(n, d) -> (n, m)``."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        return self.physical_fn(self.transform.to_physical(u))

    def to_physical(self, u) -> np.ndarray:
        return self.transform.to_physical(u)

    @property
    def differentiable(self) -> bool:
        return self.tensor_fn is not None

    def evaluate_tensor(self, u: Tensor) -> Tensor:
        if self.tensor_fn is None:
            raise TypeError(f"model {self.name!r} has no differentiable implementation")
        return self.tensor_fn(u)


def _circuit_transform(n_resistances: int) -> BoxTransform:
    lo = (RESISTANCE_BOUNDS[0],) * n_resistances + (CAPACITANCE_BOUNDS[0],)
    hi = (RESISTANCE_BOUNDS[1],) * n_resistances + (CAPACITANCE_BOUNDS[1],)
    return BoxTransform(lo, hi, (False,) * n_resistances + (True,))


def get_model(name: str, waveform: Waveform | None = None) -> ForwardModel:
    if name == "closed_form":
        return ForwardModel(
            "closed_form", 2, 2, closed_form_eval, IdentityTransform(), np.array([3.0, 5.0]),
            np.array([[0.0, 6.0], [0.0, 6.0]]), RECIPES["closed_form"],
            ("z1", "z2"), ("x1", "x2"), closed_form_eval_tensor)
    if name == "rc":
        return ForwardModel(
            "rc", 2, 3, RCCircuit(waveform), _circuit_transform(1), np.array([1000.0, 5e-5]),
            np.array([[-3.0, 3.0]] * 2), RECIPES["rc"],
            ("R", "C"), ("P_min", "P_max", "P_ave"))
    if name == "rcr":
        return ForwardModel(
            "rcr", 3, 3, RCRCircuit(waveform), _circuit_transform(2), np.array([1000.0, 1000.0, 5e-5]),
            np.array([[-3.0, 3.0]] * 3), RECIPES["rcr"],
            ("R_p", "R_d", "C"), ("P_min", "P_max", "P_ave"))
    if name == "sobol":
        return ForwardModel(
            "sobol", 5, 4, sobol_eval, IdentityTransform(), SOBOL_Z_STAR.copy(),
            np.array([[-4.0, 4.0]] * 5), RECIPES["sobol"],
            tuple(f"z{i}" for i in range(1, 6)), tuple(f"x{i}" for i in range(1, 5)),
            sobol_eval_tensor)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


__all__ = [
    "MODEL_NAMES", "ForwardModel", "NoiseRecipe", "RECIPES", "BoxTransform", "DomainError",
    "IdentityTransform", "closed_form_eval", "make_observations", "get_model", "get_recipe",
    "latent_transform", "rk4_integrate", "load_waveform", "Waveform", "sobol_eval", "sobol_ridge",
]

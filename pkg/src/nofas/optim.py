"""RMSprop and an exponential learning-rate schedule."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from nofas.autodiff import GradMap, Tensor


def exp_decay_scheduler(lr0: float, gamma: float, t: int) -> float:
    """Learning rate after ``t`` decay steps: ``lr0 * gamma**t``."""
    return lr0 * gamma**t


def rmsprop_step(
    params: Sequence[Tensor],
    grads: GradMap,
    state: list[np.ndarray],
    lr: float,
    rho: float = 0.99,
    eps: float = 1e-8,
) -> tuple[Sequence[Tensor], list[np.ndarray]]:
    """One in-place RMSprop update.

    ``state[i] <- rho*state[i] + (1-rho)*g**2`` then
    ``param[i] <- param[i] - lr*g/sqrt(state[i] + eps)``.
    """
    if lr <= 0 or not 0 < rho < 1 or eps < 0:
        raise ValueError(f"invalid RMSprop hyper-parameters lr={lr}, rho={rho}, eps={eps}")
    for i, p in enumerate(params):
        if p not in grads:
            raise KeyError(f"no gradient for parameter {i} (shape {p.shape})")
        g = grads[p].data
        state[i] *= rho
        state[i] += (1.0 - rho) * g * g
        p.data -= lr * g / np.sqrt(state[i] + eps)
    return params, state


class RMSprop:
    """RMSprop over a fixed parameter list with an exponentially decaying rate.

    :meth:`reset_schedule` rewinds the rate to ``lr0`` (the running second
    moments are kept).
    """

    def __init__(self, params: Sequence[Tensor], lr: float, gamma: float = 1.0,
                 rho: float = 0.99, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr0 = lr
        self.gamma = gamma
        self.rho = rho
        self.eps = eps
        self.t = 0
        self.state = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return exp_decay_scheduler(self.lr0, self.gamma, self.t)

    def step(self, grads: GradMap) -> None:
        rmsprop_step(self.params, grads, self.state, self.lr, self.rho, self.eps)
        self.t += 1

    def reset_schedule(self) -> None:
        self.t = 0

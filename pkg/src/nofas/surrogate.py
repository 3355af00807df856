"""Neural surrogate, pre-grid, calibration memory and the memory-weighted loss.

The surrogate takes latent coordinates and is trained against outputs
standardized with the pre-grid mean and standard deviation; calling it
returns outputs on the original scale.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nofas import autodiff as ad
from nofas.autodiff import Tensor
from nofas.flows import init_weight
from nofas.optim import RMSprop


class SurrogateError(RuntimeError):
    pass


# --- network -------------------------------------------------------------------

@dataclass
class SurrogateNet:
    """``d -> 64 -> 32 -> m`` fully connected net with tanh hidden units."""

    weights: list[Tensor]
    biases: list[Tensor]
    out_mean: np.ndarray
    out_std: np.ndarray

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def m(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def standardized(self, z) -> Tensor:
        h = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = (h @ w + b).tanh()
        return h @ self.weights[-1] + self.biases[-1]

    def __call__(self, z) -> Tensor:
        return self.standardized(z) * self.out_std + self.out_mean

    def predict(self, z) -> np.ndarray:
        """Plain numpy evaluation (no tracing even if weights require grad)."""
        h = np.atleast_2d(np.asarray(z, dtype=np.float64))
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w.data + b.data)
        return (h @ self.weights[-1].data + self.biases[-1].data) * self.out_std + self.out_mean

    def copy_weights(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]


def build_surrogate(d: int, m: int, hidden=(64, 32), seed: int | np.random.Generator = 0,
                    scheme: str = "glorot-uniform") -> SurrogateNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = [d, *hidden, m]
    weights = [Tensor(init_weight(rng, a, b, scheme), requires_grad=True) for a, b in zip(sizes, sizes[1:])]
    biases = [Tensor(np.zeros(b), requires_grad=True) for b in sizes[1:]]
    return SurrogateNet(weights, biases, np.zeros(m), np.ones(m))


def set_standardization(net: SurrogateNet, outputs: np.ndarray) -> None:
    """Fix the output scaling from reference outputs (constant columns get std 1)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    net.out_mean = outputs.mean(axis=0)
    std = outputs.std(axis=0)
    net.out_std = np.where(std > 0, std, 1.0)


# --- pre-grid and memory -----------------------------------------------------------

def make_pregrid(bounds, counts) -> np.ndarray:
    """Tensor-product grid, ``counts[i]`` equally spaced points on ``bounds[i]`` inclusive."""
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError(f"bounds must have shape (d, 2), got {bounds.shape}")
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (bounds.shape[0],))
    if np.any(counts < 2):
        raise ValueError(f"need at least 2 points per dimension, got counts {counts.tolist()}")
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def _check_outputs(z: np.ndarray, x: np.ndarray, origin: str) -> None:
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SurrogateError(f"non-finite true-model output in {origin} at sample {i}, z = {z[i].tolist()}")


@dataclass
class CalibrationMemory:
    """Pre-grid plus a FIFO queue of at most ``capacity`` calibration batches."""

    pregrid_z: np.ndarray
    pregrid_x: np.ndarray
    capacity: int = 20
    queue: deque = field(default_factory=deque)
    history: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.pregrid_z = np.atleast_2d(np.asarray(self.pregrid_z, dtype=np.float64))
        self.pregrid_x = np.atleast_2d(np.asarray(self.pregrid_x, dtype=np.float64))
        _check_outputs(self.pregrid_z, self.pregrid_x, "pre-grid")

    def push(self, alpha: int, z, x) -> None:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if z.shape[0] != x.shape[0]:
            raise ValueError("batch inputs and outputs differ in length")
        if self.queue and alpha <= self.queue[-1][0]:
            raise ValueError(f"calibration index {alpha} not after {self.queue[-1][0]}")
        _check_outputs(z, x, f"calibration batch {alpha}")
        self.queue.append((alpha, z, x))
        self.history.append((alpha, z, x))
        while len(self.queue) > self.capacity:
            self.queue.popleft()

    @property
    def alphas(self) -> list[int]:
        return [a for a, _, _ in self.queue]

    @property
    def n_evaluations(self) -> int:
        """True-model outputs ever stored (pre-grid plus every pushed batch)."""
        return len(self.pregrid_z) + sum(len(z) for _, z, _ in self.history)

    def to_csv(self, path, fmt: str = "%.17g") -> None:
        """All stored samples; ``alpha`` 0 marks the pre-grid, ``in_queue`` the live batches."""
        d, m = self.pregrid_z.shape[1], self.pregrid_x.shape[1]
        live = set(self.alphas)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "in_queue", *(f"z{i + 1}" for i in range(d)), *(f"x{i + 1}" for i in range(m))])
            blocks = [(0, self.pregrid_z, self.pregrid_x)] + self.history
            for alpha, z, x in blocks:
                flag = 1 if alpha == 0 or alpha in live else 0
                for zi, xi in zip(z, x):
                    w.writerow([alpha, flag, *(fmt % v for v in zi), *(fmt % v for v in xi)])


def memory_weights(j: int, alphas, beta1: float) -> np.ndarray:
    """Softmax over stored batches of ``exp(-beta1 * (j - alpha))``."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0:
        raise ValueError("memory queue is empty")
    logits = np.exp(-beta1 * (j - alphas))
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass(frozen=True)
class LossWeights:
    beta0: float = 0.5
    beta1: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.beta0 <= 1:
            raise ValueError(f"beta0 must lie in (0, 1], got {self.beta0}")
        if self.beta1 < 0:
            raise ValueError(f"beta1 must be >= 0, got {self.beta1}")


def training_set(memory: CalibrationMemory, weights: LossWeights, j: int):
    """Stack all stored points with per-point loss coefficients.

    The loss is then ``sum_i c_i ||f_hat(z_i) - x_i||^2``, which equals the
    pre-grid mean error weighted by ``beta0`` plus the softmax-weighted
    batch mean errors scaled by ``1 - beta0``.
    """
    zs, xs = [memory.pregrid_z], [memory.pregrid_x]
    coef = [np.full(len(memory.pregrid_z), weights.beta0 / len(memory.pregrid_z))]
    if memory.queue:
        w = memory_weights(j, memory.alphas, weights.beta1)
        for wa, (_, z, x) in zip(w, memory.queue):
            zs.append(z)
            xs.append(x)
            coef.append(np.full(len(z), (1.0 - weights.beta0) * wa / len(z)))
    return np.concatenate(zs), np.concatenate(xs), np.concatenate(coef)


def _loss_tensor(net: SurrogateNet, z: np.ndarray, x_std: np.ndarray, coef: np.ndarray) -> Tensor:
    r = net.standardized(Tensor(z)) - x_std
    return (r.square().sum(axis=1) * coef).sum()


def surrogate_loss(net: SurrogateNet, memory: CalibrationMemory, weights: LossWeights, j: int) -> float:
    """Memory-weighted squared error in standardized output units."""
    z, x, coef = training_set(memory, weights, j)
    r = (net.predict(z) - x) / net.out_std
    return float(np.sum(coef * np.sum(r * r, axis=1)))


# --- acquisition and training -------------------------------------------------------

def acquire_batch(zk, size: int, eps: float = 0.1, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Subsample ``size`` rows without replacement; jitter coordinates whose batch std < ``eps``."""
    zk = np.atleast_2d(np.asarray(zk, dtype=np.float64))
    if size > len(zk):
        raise ValueError(f"cannot draw {size} samples from a batch of {len(zk)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(zk), size=size, replace=False)
    out = zk[idx].copy()
    narrow = zk.std(axis=0) < eps
    if np.any(narrow):
        out[:, narrow] += rng.normal(0.0, eps, size=(size, int(narrow.sum())))
    return out


@dataclass
class SurrogateTrainer:
    """Surrogate plus its RMSprop state; the schedule restarts on every update."""

    net: SurrogateNet
    lr: float = 0.003
    gamma: float = 0.995
    optimizer: RMSprop | None = None

    def __post_init__(self) -> None:
        if self.optimizer is None:
            self.optimizer = RMSprop(self.net.parameters(), self.lr, self.gamma)


def update_surrogate(trainer: SurrogateTrainer, memory: CalibrationMemory, weights: LossWeights,
                     j: int, n_iter: int = 1000) -> tuple[float, float]:
    """Run ``n_iter`` RMSprop steps on the memory loss; returns the loss before and after."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    net, opt = trainer.net, trainer.optimizer
    z, x, coef = training_set(memory, weights, j)
    x_std = (x - net.out_mean) / net.out_std
    opt.reset_schedule()
    before = surrogate_loss(net, memory, weights, j)
    for it in range(n_iter):
        with ad.tape():
            loss = _loss_tensor(net, z, x_std, coef)
        if not np.isfinite(loss.item()):
            raise SurrogateError(f"non-finite surrogate loss at inner step {it} (calibration {j})")
        opt.step(ad.backward(loss))
    after = surrogate_loss(net, memory, weights, j)
    if not np.isfinite(after):
        per_point = np.sum(((net.predict(z) - x) / net.out_std) ** 2, axis=1)
        i = int(np.flatnonzero(~np.isfinite(per_point))[0]) if np.any(~np.isfinite(per_point)) else -1
        raise SurrogateError(f"non-finite surrogate loss after calibration {j} (sample {i}: z = {z[i].tolist()})")
    return before, after


def fit_surrogate(model_fn, bounds, counts, *, seed: int = 0, n_iter: int = 5000, lr: float = 0.003,
                  gamma: float = 0.995, scheme: str = "glorot-uniform", hidden=(64, 32),
                  capacity: int = 20) -> tuple[SurrogateTrainer, CalibrationMemory]:
    """Evaluate ``model_fn`` on a pre-grid and fit a fresh surrogate to it alone."""
    zp = make_pregrid(bounds, counts)
    xp = np.atleast_2d(model_fn(zp))
    net = build_surrogate(zp.shape[1], xp.shape[1], hidden, seed, scheme)
    set_standardization(net, xp)
    memory = CalibrationMemory(zp, xp, capacity)
    trainer = SurrogateTrainer(net, lr, gamma)
    update_surrogate(trainer, memory, LossWeights(1.0, 0.0), 0, n_iter)
    return trainer, memory


__all__ = [
    "SurrogateNet", "SurrogateError", "build_surrogate", "set_standardization", "make_pregrid",
    "CalibrationMemory", "memory_weights", "LossWeights", "training_set", "surrogate_loss",
    "acquire_batch", "SurrogateTrainer", "update_surrogate", "fit_surrogate",
]

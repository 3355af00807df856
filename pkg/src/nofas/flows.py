"""Normalizing-flow layers: MADE/MAF, affine coupling and batch normalization.

All layers map a batch ``z`` of shape ``(b, d)`` forward (base -> target) and
return ``(z_out, log_det)`` with ``log_det`` of shape ``(b,)`` holding
``log|det dF/dz|`` per sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nofas import autodiff as ad
from nofas.autodiff import Tensor

INIT_SCHEMES = ("glorot-uniform", "kaiming-uniform", "kaiming-normal")
LOG_2PI = math.log(2.0 * math.pi)


class FlowError(RuntimeError):
    """Numerical failure inside a flow layer (overflow, bad batch)."""


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, scheme: str) -> np.ndarray:
    """Weight matrix of shape ``(fan_in, fan_out)`` drawn per ``scheme``."""
    if scheme == "glorot-uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))
    if scheme == "kaiming-uniform":
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))
    if scheme == "kaiming-normal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    raise ValueError(f"unknown init scheme {scheme!r}; valid schemes: {', '.join(INIT_SCHEMES)}")


def _check_finite(alpha: Tensor, index: int | None, kind: str) -> None:
    if not np.all(np.isfinite(alpha.data)):
        raise FlowError(f"non-finite log-scale in {kind} layer {index}")
    if np.any(alpha.data > 700):
        raise FlowError(f"log-scale overflow (exp(alpha) > 1e304) in {kind} layer {index}")


# --- MADE -----------------------------------------------------------------

@dataclass
class MadeNetwork:
    """Masked autoencoder with shared-mask shift (mu) and log-scale (alpha) heads.

    Weights and masks are stored as ``(in, out)`` so a layer is
    ``h @ (W * M) + b``.  ``degrees[0]`` holds the input degrees ``1..d``,
    ``degrees[l]`` the hidden degrees of layer ``l``.
    """

    d: int
    hidden: tuple[int, ...]
    degrees: list[np.ndarray]
    masks: list[np.ndarray]
    weights: list[Tensor]
    biases: list[Tensor]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def connectivity(self) -> np.ndarray:
        """Input->output dependency matrix ``(d_out, d_in)`` of the mask product."""
        prod = self.masks[0]
        for m in self.masks[1:-2]:
            prod = prod @ m
        return (prod @ self.masks[-1]).T

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h = z
        n_hidden = len(self.hidden)
        for k in range(n_hidden):
            h = (h @ (self.weights[k] * self.masks[k]) + self.biases[k]).relu()
        mu = h @ (self.weights[n_hidden] * self.masks[n_hidden]) + self.biases[n_hidden]
        alpha = h @ (self.weights[n_hidden + 1] * self.masks[n_hidden + 1]) + self.biases[n_hidden + 1]
        return mu, alpha


def build_made(d: int, hidden, seed: int | np.random.Generator = 0,
               scheme: str = "glorot-uniform") -> MadeNetwork:
    if d < 2:
        raise ValueError(f"MADE needs d >= 2 for autoregressive masks, got d={d}")
    hidden = tuple(int(h) for h in hidden)
    if not hidden or min(hidden) < 1:
        raise ValueError(f"hidden widths must be >= 1, got {hidden}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    degrees = [np.arange(1, d + 1)]
    for width in hidden:
        offset = int(rng.integers(d - 1))
        degrees.append((np.arange(width) + offset) % (d - 1) + 1)
    masks = []
    for l in range(1, len(degrees)):
        # M[u, v] = 1 iff m^l(u) >= m^{l-1}(v); stored transposed
        masks.append((degrees[l][None, :] >= degrees[l - 1][:, None]).astype(np.float64))
    out_mask = (np.arange(1, d + 1)[None, :] > degrees[-1][:, None]).astype(np.float64)
    masks += [out_mask, out_mask]

    widths = (d, *hidden)
    weights = [Tensor(init_weight(rng, widths[k], widths[k + 1], scheme), requires_grad=True)
               for k in range(len(hidden))]
    weights += [Tensor(init_weight(rng, hidden[-1], d, scheme), requires_grad=True) for _ in range(2)]
    biases = [Tensor(np.zeros(w), requires_grad=True) for w in (*hidden, d, d)]
    return MadeNetwork(d, hidden, degrees, masks, weights, biases)


# --- layers ---------------------------------------------------------------

@dataclass
class MafLayer:
    """Masked autoregressive affine layer: ``z'_i = z_i*exp(alpha_i) + mu_i``.

    ``order`` permutes the coordinates before the MADE pass, so coordinate
    ``order[i]`` is conditioned on ``order[:i]``.
    """

    made: MadeNetwork
    order: np.ndarray
    index: int | None = None

    def parameters(self) -> list[Tensor]:
        return self.made.parameters()

    def transform(self, z: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
        identity = np.array_equal(self.order, np.arange(len(self.order)))
        zp = z if identity else z[:, self.order]
        mu, alpha = self.made(zp)
        _check_finite(alpha, self.index, "MAF")
        out = zp * alpha.exp() + mu
        if not identity:
            out = out[:, np.argsort(self.order)]
        return out, alpha.sum(axis=1)


@dataclass
class Conditioner:
    """Single-hidden-layer relu network used by coupling layers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).relu() @ self.w2 + self.b2


@dataclass
class CouplingLayer:
    """Affine coupling layer.

    Without ``flip`` the first ``split`` coordinates pass through and the rest
    are transformed; with ``flip`` the roles are swapped.  Both shift and
    log-scale are functions of the pass-through block only.
    """

    d: int
    split: int
    f_mu: Conditioner
    f_alpha: Conditioner
    flip: bool = False
    index: int | None = None

    def parameters(self) -> list[Tensor]:
        return self.f_mu.parameters() + self.f_alpha.parameters()

    def transform(self, z: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
        k = self.split
        if self.flip:
            moved, passed = z[:, :k], z[:, k:]
        else:
            passed, moved = z[:, :k], z[:, k:]
        mu, alpha = self.f_mu(passed), self.f_alpha(passed)
        _check_finite(alpha, self.index, "coupling")
        moved = moved * alpha.exp() + mu
        parts = [moved, passed] if self.flip else [passed, moved]
        return ad.concat(parts, axis=1), alpha.sum(axis=1)


@dataclass
class BatchNormLayer:
    """Batch-normalization bijection ``beta + (z - m)/sqrt(v + eps) * exp(gamma)``.

    ``mode='train'`` uses the batch statistics and refreshes the running ones;
    ``'batch'`` uses batch statistics without touching the running averages;
    ``'eval'`` uses the running averages.
    """

    beta: Tensor
    gamma: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    index: int | None = None

    def __post_init__(self) -> None:
        d = self.beta.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(d)
        if self.running_var is None:
            self.running_var = np.ones(d)

    def parameters(self) -> list[Tensor]:
        return [self.beta, self.gamma]

    def transform(self, z: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
        b = z.shape[0]
        if mode == "eval":
            m, v = Tensor(self.running_mean), Tensor(self.running_var)
        elif mode in ("train", "batch"):
            if b < 2:
                raise FlowError(f"batch-norm layer {self.index} needs batch size >= 2 in {mode} mode, got {b}")
            m = z.mean(axis=0)
            v = (z - m).square().mean(axis=0)
            if mode == "train":
                mom = self.momentum
                self.running_mean = (1 - mom) * self.running_mean + mom * m.data
                self.running_var = (1 - mom) * self.running_var + mom * v.data
        else:
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        half_log_v = (v + self.eps).log() * 0.5
        out = self.beta + (z - m) * (self.gamma - half_log_v).exp()
        log_det = (self.gamma - half_log_v).sum()
        return out, log_det.broadcast_to((b,))


# --- stacks ---------------------------------------------------------------

@dataclass
class FlowSpec:
    """Architecture of a flow stack (serialized with the run config)."""

    dim: int
    kind: str = "maf"              # "maf" | "realnvp"
    n_layers: int = 5
    hidden: int = 100
    batchnorm: bool = True
    permute: bool = True


@dataclass
class FlowStack:
    """Layers applied in order, then a fixed (untrained) shift ``offset``."""

    dim: int
    layers: list = field(default_factory=list)
    offset: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, z0: np.ndarray, mode: str = "train") -> tuple[Tensor, Tensor]:
        """Push base samples through every layer; returns ``(z_K, sum log_det)``."""
        z = Tensor(z0)
        total = Tensor(np.zeros(z0.shape[0]))
        for layer in self.layers:
            z, ld = layer.transform(z, mode)
            total = total + ld
        if self.offset is not None:
            z = z + self.offset
        return z, total


def base_log_density(z0: np.ndarray) -> np.ndarray:
    d = z0.shape[1]
    return -0.5 * np.sum(z0 * z0, axis=1) - 0.5 * d * LOG_2PI


def flow_sample(stack: FlowStack, b: int, seed: int | np.random.Generator = 0,
                mode: str = "train") -> tuple[np.ndarray, Tensor, Tensor]:
    """Draw ``b`` samples: returns ``(z0, z_K, log q_K(z_K))``."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z0 = rng.standard_normal((b, stack.dim))
    zk, log_det = stack.forward(z0, mode)
    log_q = Tensor(base_log_density(z0)) - log_det
    return z0, zk, log_q


def _coupling(rng, d: int, hidden: int, flip: bool, scheme: str, index: int) -> CouplingLayer:
    split = d // 2
    n_in, n_out = (d - split, split) if flip else (split, d - split)

    def net(zero_head: bool) -> Conditioner:
        w2 = np.zeros((hidden, n_out)) if zero_head else init_weight(rng, hidden, n_out, scheme)
        return Conditioner(
            Tensor(init_weight(rng, n_in, hidden, scheme), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor(w2, requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    return CouplingLayer(d, split, net(False), net(True), flip=flip, index=index)


def init_flow(spec: FlowSpec, scheme: str = "glorot-uniform", seed: int = 0) -> FlowStack:
    """Build a stack of ``[batch-norm -> affine]`` blocks with near-identity init.

    The log-scale heads start at zero weight and bias, so every affine layer
    contributes ``log_det = 0`` on the first pass.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; valid schemes: {', '.join(INIT_SCHEMES)}")
    if spec.kind not in ("maf", "realnvp"):
        raise ValueError(f"unknown flow kind {spec.kind!r}; expected 'maf' or 'realnvp'")
    rng = np.random.default_rng(seed)
    d = spec.dim
    layers = []
    for k in range(spec.n_layers):
        if spec.batchnorm:
            layers.append(BatchNormLayer(Tensor(np.zeros(d), requires_grad=True),
                                         Tensor(np.zeros(d), requires_grad=True),
                                         index=len(layers)))
        if spec.kind == "maf":
            made = build_made(d, (spec.hidden,), rng, scheme)
            made.weights[-1].data[:] = 0.0
            made.biases[-1].data[:] = 0.0
            order = np.arange(d)[::-1].copy() if spec.permute and k % 2 else np.arange(d)
            layers.append(MafLayer(made, order, index=len(layers)))
        else:
            layers.append(_coupling(rng, d, spec.hidden, bool(k % 2), scheme, len(layers)))
    return FlowStack(d, layers)

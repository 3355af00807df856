"""Reference samplers: random-walk Metropolis-Hastings and mean-field Gaussian BBVI."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from nofas import autodiff as ad
from nofas.autodiff import Tensor
from nofas.engine import (
    LikelihoodSpec,
    log_likelihood,
    log_likelihood_tensor,
    log_prior_tensor,
    project_to_box,
)
from nofas.optim import RMSprop

LOG_2PI = math.log(2.0 * math.pi)


class SamplerError(RuntimeError):
    pass


# --- targets ------------------------------------------------------------------------

def make_log_target(f, spec: LikelihoodSpec, hard_box: bool = True):
    """Batch log posterior ``z -> log p(x|z) + log pi(z)`` (numpy).

    With ``hard_box`` the prior is uniform on ``spec.box`` and points outside
    get ``-inf`` without calling ``f``.
    """
    box = spec.box

    def log_target(z):
        z = np.atleast_2d(z)
        out = np.full(len(z), -np.inf)
        inside = np.ones(len(z), dtype=bool)
        if hard_box and box is not None:
            inside = np.all((z >= box[:, 0]) & (z <= box[:, 1]), axis=1)
        if np.any(inside):
            out[inside] = log_likelihood(f(z[inside]), spec)
        return out

    return log_target


def make_log_joint_tensor(f_tensor, spec: LikelihoodSpec):
    """Differentiable log joint with the soft box penalty used by the flow loss."""

    def log_joint(z: Tensor) -> Tensor:
        lp = log_prior_tensor(z, spec)
        return log_likelihood_tensor(f_tensor(project_to_box(z, spec.box)), spec) + lp

    return log_joint


# --- Metropolis-Hastings ----------------------------------------------------------------------

def gaussian_proposal(std):
    std = np.asarray(std, dtype=np.float64)

    def propose(z, rng):
        return z + std * rng.standard_normal(z.shape)

    return propose


def mh_step(z, log_p, log_target, propose, rng):
    """One symmetric-proposal MH update for a stack of chains.

    ``z`` is ``(c, d)`` with cached log-targets ``log_p`` of shape ``(c,)``.
    Returns ``(z_next, log_p_next, accepted)``.
    """
    z_new = propose(z, rng)
    lp_new = log_target(z_new)
    log_u = np.log(rng.random(len(z)))
    accept = log_u < lp_new - log_p
    accept &= np.isfinite(lp_new)
    z_next = np.where(accept[:, None], z_new, z)
    return z_next, np.where(accept, lp_new, log_p), accept


@dataclass
class MhConfig:
    proposal_var: tuple[float, ...] | float = 0.01
    n_iter: int = 4_000_000
    burn_in: float = 0.1
    thin: int = 1000
    n_chains: int = 4
    seed: int = 0
    box: np.ndarray | None = None
    starts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.n_iter <= 0 or self.thin < 1 or not 0 <= self.burn_in < 1 or self.n_chains < 1:
            raise ValueError(f"invalid MH settings: n_iter={self.n_iter}, thin={self.thin}, "
                             f"burn_in={self.burn_in}, n_chains={self.n_chains}")

    @property
    def n_retained(self) -> int:
        return retained_count(self.n_iter, self.burn_in, self.thin)


def retained_count(n_iter: int, burn_in: float, thin: int) -> int:
    """``floor(n_iter * (1 - burn_in) / thin)``."""
    return int(math.floor(n_iter * (1.0 - burn_in) / thin + 1e-9))


@dataclass
class MhResult:
    chains: np.ndarray            # (n_chains, n_retained, d)
    acceptance: np.ndarray        # per chain
    iterations: np.ndarray        # iteration index of each retained sample

    @property
    def acceptance_rate(self) -> float:
        return float(self.acceptance.mean())

    @property
    def samples(self) -> np.ndarray:
        return self.chains.reshape(-1, self.chains.shape[-1])

    def write_chains(self, path, names=None, fmt: str = "%.17g") -> None:
        d = self.chains.shape[-1]
        names = list(names) if names is not None else [f"z{i + 1}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration", *names])
            for c, chain in enumerate(self.chains):
                for it, row in zip(self.iterations, chain):
                    w.writerow([c, int(it), *(fmt % v for v in row)])


def overdispersed_starts(box: np.ndarray, n_chains: int, rng) -> np.ndarray:
    """Points near distinct corners of ``box`` (10% in from each face)."""
    d = box.shape[0]
    n_corners = 2**d
    picks = rng.choice(n_corners, size=n_chains, replace=n_chains > n_corners)
    bits = (picks[:, None] >> np.arange(d)) & 1
    frac = np.where(bits == 1, 0.9, 0.1)
    return box[:, 0] + frac * (box[:, 1] - box[:, 0])


def mh_run(log_target, d: int, config: MhConfig, propose=None) -> MhResult:
    """Run ``n_chains`` random-walk chains in lockstep and keep the thinned tail."""
    rng = np.random.default_rng(config.seed)
    if propose is None:
        std = np.sqrt(np.broadcast_to(np.asarray(config.proposal_var, dtype=np.float64), (d,)))
        propose = gaussian_proposal(std)
    if config.starts is not None:
        z = np.array(config.starts, dtype=np.float64).reshape(config.n_chains, d)
    elif config.box is not None:
        z = overdispersed_starts(np.asarray(config.box, dtype=np.float64), config.n_chains, rng)
    else:
        z = rng.standard_normal((config.n_chains, d))
    lp = log_target(z)
    if not np.all(np.isfinite(lp)):
        raise SamplerError(f"log-target not finite at the starting points {z[~np.isfinite(lp)].tolist()}")
    n_keep = config.n_retained
    first = config.n_iter - n_keep * config.thin
    chains = np.empty((config.n_chains, n_keep, d))
    accepted = np.zeros(config.n_chains)
    k = 0
    for t in range(config.n_iter):
        z, lp, acc = mh_step(z, lp, log_target, propose, rng)
        accepted += acc
        if t >= first and (t - first + 1) % config.thin == 0:
            chains[:, k] = z
            k += 1
    iterations = first + config.thin * np.arange(1, n_keep + 1) - 1
    return MhResult(chains, accepted / config.n_iter, iterations)


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction per dimension for ``(m, n, d)`` chains (``W = 0`` gives 1)."""
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    m, n = x.shape[:2]
    if m < 2:
        raise ValueError(f"need at least 2 chains, got {m}")
    if n < 10:
        raise ValueError(f"need chains of length >= 10, got {n}")
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b = n * x.mean(axis=1).var(axis=0, ddof=1)
    pooled = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(pooled / w)
    return np.where(w > 0, r, 1.0)


# --- BBVI ------------------------------------------------------------------------------------

@dataclass
class BbviConfig:
    n_iter: int = 10000
    n_mc: int = 50
    lr: float = 0.01
    lr_decay: float = 0.9999
    seed: int = 0
    init_mean: np.ndarray | None = None
    init_log_std: float = 0.0

    def __post_init__(self) -> None:
        if self.n_mc < 1:
            raise ValueError("need at least one Monte-Carlo sample per step")


@dataclass
class BbviResult:
    mean: np.ndarray
    std: np.ndarray
    elbo: np.ndarray

    @property
    def correlation(self) -> np.ndarray:
        """Correlation matrix of the fitted family (identity by construction)."""
        return np.eye(len(self.mean))

    def sample(self, n: int, seed: int | np.random.Generator = 0) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.mean + self.std * rng.standard_normal((n, len(self.mean)))


def bbvi_run(log_joint, d: int, config: BbviConfig) -> BbviResult:
    """Fit ``N(mu, diag(sigma^2))`` by maximising the ELBO with reparameterised gradients.

    ``log_joint`` maps a traced ``(b, d)`` batch to per-sample log joint
    densities.  The Gaussian entropy enters in closed form.
    """
    rng = np.random.default_rng(config.seed)
    init = np.zeros(d) if config.init_mean is None else np.asarray(config.init_mean, dtype=np.float64)
    mu = Tensor(init.copy(), requires_grad=True)
    log_sigma = Tensor(np.full(d, config.init_log_std), requires_grad=True)
    opt = RMSprop([mu, log_sigma], config.lr, config.lr_decay)
    trace = np.empty(config.n_iter)
    const = 0.5 * d * (1.0 + LOG_2PI)
    for t in range(config.n_iter):
        u = rng.standard_normal((config.n_mc, d))
        with ad.tape():
            z = mu + log_sigma.exp() * u
            elbo = log_joint(z).mean() + log_sigma.sum() + const
            loss = -elbo
        value = elbo.item()
        if not np.isfinite(value):
            raise SamplerError(f"non-finite ELBO at iteration {t}")
        trace[t] = value
        opt.step(ad.backward(loss))
    return BbviResult(mu.data.copy(), np.exp(log_sigma.data), trace)


__all__ = [
    "make_log_target", "make_log_joint_tensor", "gaussian_proposal", "mh_step", "MhConfig",
    "MhResult", "retained_count", "overdispersed_starts", "mh_run", "gelman_rubin",
    "BbviConfig", "BbviResult", "bbvi_run", "SamplerError",
]

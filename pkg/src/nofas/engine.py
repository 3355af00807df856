"""Alternating flow / surrogate optimisation with a hard budget of true-model calls."""
from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nofas import autodiff as ad
from nofas.autodiff import Tensor
from nofas.flows import FlowSpec, FlowStack, flow_sample, init_flow
from nofas.models import DomainError, ForwardModel, get_recipe, make_observations
from nofas.models.circuits import IntegrationError
from nofas.optim import RMSprop
from nofas.surrogate import (
    CalibrationMemory,
    LossWeights,
    SurrogateTrainer,
    acquire_batch,
    build_surrogate,
    make_pregrid,
    set_standardization,
    update_surrogate,
)

LOG_2PI = math.log(2.0 * math.pi)
PRIOR_PENALTY = 100.0


class BudgetWarning(UserWarning):
    pass


class InferenceError(RuntimeError):
    pass


# --- likelihood -------------------------------------------------------------------

@dataclass
class LikelihoodSpec:
    """Gaussian likelihood with known per-output std and an optional box prior.

    ``box`` is ``(d, 2)`` in latent coordinates; ``None`` means an improper
    flat prior.
    """

    observations: np.ndarray
    sigma: np.ndarray
    box: np.ndarray | None = None
    penalty: float = PRIOR_PENALTY

    def __post_init__(self) -> None:
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64),
                                     (self.observations.shape[1],)).copy()
        if np.any(self.sigma <= 0):
            raise ValueError(f"standard deviations must be positive, got {self.sigma.tolist()}")
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=np.float64)
        n, m = self.observations.shape
        # sum_i (f - x_i)^2 = n (f - xbar)^2 + sum_i (x_i - xbar)^2
        self.mean = self.observations.mean(axis=0)
        spread = ((self.observations - self.mean) / self.sigma) ** 2
        self.offset = -0.5 * spread.sum() - 0.5 * n * m * LOG_2PI - n * np.log(self.sigma).sum()

    @property
    def n(self) -> int:
        return self.observations.shape[0]


def log_likelihood(outputs, spec: LikelihoodSpec) -> np.ndarray:
    """Per-sample log-likelihood of model outputs ``(b, m)``."""
    f = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    r = (f - spec.mean) / spec.sigma
    return -0.5 * spec.n * np.sum(r * r, axis=1) + spec.offset


def log_likelihood_tensor(outputs: Tensor, spec: LikelihoodSpec) -> Tensor:
    r = (outputs - spec.mean) * (1.0 / spec.sigma)
    return r.square().sum(axis=1) * (-0.5 * spec.n) + spec.offset


def log_prior(z, spec: LikelihoodSpec) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if spec.box is None:
        return np.zeros(len(z))
    lo, hi = spec.box[:, 0], spec.box[:, 1]
    out = np.maximum(lo - z, 0.0) ** 2 + np.maximum(z - hi, 0.0) ** 2
    return -spec.penalty * out.sum(axis=1)


def log_prior_tensor(z: Tensor, spec: LikelihoodSpec) -> Tensor | float:
    """Zero inside the box, ``-penalty * distance**2`` outside."""
    if spec.box is None:
        return 0.0
    lo, hi = spec.box[:, 0], spec.box[:, 1]
    below = ad.maximum(lo - z, 0.0)
    above = ad.maximum(z - hi, 0.0)
    return (below.square() + above.square()).sum(axis=1) * (-spec.penalty)


def project_to_box(z: Tensor, box: np.ndarray | None) -> Tensor:
    """Clamp a traced batch onto ``box``; clamped coordinates carry no gradient."""
    if box is None:
        return z
    lo, hi = box[:, 0], box[:, 1]
    return z + ad.maximum(lo - z, 0.0) - ad.maximum(z - hi, 0.0)


def _inside(z: np.ndarray, box: np.ndarray | None) -> np.ndarray:
    if box is None:
        return np.ones(len(z), dtype=bool)
    return np.all((z >= box[:, 0]) & (z <= box[:, 1]), axis=1)


def free_energy(stack: FlowStack, spec: LikelihoodSpec, f_tensor, b: int,
                seed: int | np.random.Generator = 0, mode: str = "train") -> tuple[Tensor, np.ndarray]:
    """One-batch Monte-Carlo free energy ``mean(log q) - mean(log p(x, z))``.

    ``f_tensor`` maps a traced ``(b, d)`` batch to ``(b, m)`` outputs (the
    surrogate or a differentiable model).  It is evaluated at the projection
    of ``z_K`` onto the prior box, so outside the box only the penalty acts.
    Must be called inside a tape.  Returns the loss and the sample batch ``z_K``.
    """
    if b < 1:
        raise ValueError("batch size must be >= 1")
    _, zk, log_q = flow_sample(stack, b, seed, mode)
    if not np.any(_inside(zk.data, spec.box)):
        raise InferenceError("every flow sample lies outside the prior box")
    ll = log_likelihood_tensor(f_tensor(project_to_box(zk, spec.box)), spec)
    lp = log_prior_tensor(zk, spec)
    return log_q.mean() - (ll + lp).mean(), zk.data


# --- convergence -----------------------------------------------------------------------

def _moving_change(csum: np.ndarray, t: int, w: int) -> float:
    cur = (csum[t] - csum[t - w]) / w
    prev = (csum[t - w] - csum[t - 2 * w]) / w
    return abs(cur - prev) / abs(prev) if prev != 0 else (0.0 if cur == 0 else math.inf)


def convergence_detector(trace, window: int = 100, threshold: float = 0.0005) -> int | None:
    """First trace length ``t`` at which consecutive ``window`` averages differ by < ``threshold`` (relative)."""
    if window < 2:
        raise ValueError("window must be >= 2")
    x = np.asarray(trace, dtype=np.float64)
    if len(x) < 2 * window:
        return None
    csum = np.concatenate([[0.0], np.cumsum(x)])
    for t in range(2 * window, len(x) + 1):
        if _moving_change(csum, t, window) < threshold:
            return t
    return None


# --- configuration and results ---------------------------------------------------------

@dataclass
class NoFasConfig:
    batch_size: int = 200
    calib_interval: int = 1000
    calib_size: int = 2
    memory: int = 20
    beta0: float = 0.5
    beta1: float = 0.1
    n_iter: int = 25001
    surrogate_iter: int = 1000
    surrogate_init_iter: int = 5000
    budget: int = 64
    lr: float = 0.002
    lr_decay: float = 0.9999
    surrogate_lr: float = 0.003
    surrogate_decay: float = 0.995
    pregrid: tuple[int, ...] = (4, 4)
    jitter: float = 0.1
    n_obs: int = 50
    n_samples: int = 5000
    use_surrogate: bool = True
    early_stop: bool = False
    window: int = 100
    threshold: float = 0.0005
    init_scheme: str = "glorot-uniform"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.batch_size >= self.calib_size >= 1:
            raise ValueError("need batch_size >= calib_size >= 1")
        if self.calib_interval < 1:
            raise ValueError("calib_interval must be >= 1")

    @property
    def pregrid_size(self) -> int:
        return int(np.prod(self.pregrid))


@dataclass
class RunRecord:
    config: dict
    iterations: np.ndarray
    losses: np.ndarray
    lrs: np.ndarray
    budget_used: np.ndarray
    samples_latent: np.ndarray
    samples_physical: np.ndarray
    param_names: tuple[str, ...]
    output_names: tuple[str, ...]
    memory: CalibrationMemory | None = None
    predictive: np.ndarray | None = None
    predictive_raw: np.ndarray | None = None
    n_skipped: int = 0
    n_calibrations: int = 0
    converged_at: int | None = None
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def total_evaluations(self) -> int:
        return int(self.budget_used[-1]) if len(self.budget_used) else 0

    def write(self, directory, fmt: str = "%.17g") -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.snapshot", "w") as fh:
            for k, v in self.config.items():
                fh.write(f"{k} = {_format_value(v)}\n")
        _write_csv(out / "loss_trace.csv", ["iteration", "loss", "lr", "budget_used"],
                   np.column_stack([self.iterations, self.losses, self.lrs, self.budget_used]), fmt,
                   int_cols=(0, 3))
        header = [f"u_{p}" for p in self.param_names] + list(self.param_names)
        _write_csv(out / "posterior_samples.csv", header,
                   np.column_stack([self.samples_latent, self.samples_physical]), fmt)
        if self.predictive is not None:
            header = [f"{o}" for o in self.output_names] + [f"{o}_raw" for o in self.output_names]
            _write_csv(out / "predictive_samples.csv", header,
                       np.column_stack([self.predictive, self.predictive_raw]), fmt)
        if self.memory is not None:
            self.memory.to_csv(out / "memory.csv", fmt)
        return out


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows, fmt, int_cols=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([str(int(v)) if i in int_cols else fmt % v for i, v in enumerate(row)])


# --- predictive --------------------------------------------------------------------------

def _evaluate_safely(model: ForwardModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """True-model outputs and a validity mask; samples that fail are skipped."""
    try:
        return model.evaluate(z), np.ones(len(z), dtype=bool)
    except (DomainError, IntegrationError, ValueError):
        pass
    out = np.full((len(z), model.out_dim), np.nan)
    ok = np.zeros(len(z), dtype=bool)
    for i, zi in enumerate(z):
        try:
            out[i] = model.evaluate(zi[None, :])[0]
            ok[i] = True
        except (DomainError, IntegrationError, ValueError):
            pass
    return out, ok


def posterior_predictive(z, model: ForwardModel, recipe=None,
                         seed: int | np.random.Generator = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """True-model outputs at posterior samples, with and without observation noise.

    Returns ``(noisy, raw, n_skipped)``; skipped samples are dropped.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    raw, ok = _evaluate_safely(model, z)
    raw = raw[ok]
    std = get_recipe(recipe if recipe is not None else model.recipe).std(model.x_star)
    noisy = raw + std * rng.standard_normal(raw.shape)
    return noisy, raw, int((~ok).sum())


# --- the alternating loop -------------------------------------------------------------------

def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed (same data for every method)."""
    ss = np.random.SeedSequence(seed)
    names = ("obs", "flow_init", "surrogate_init", "flow", "acquire", "final", "predictive")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def make_likelihood(model: ForwardModel, n_obs: int, rng) -> LikelihoodSpec:
    x_star = model.x_star
    obs = make_observations(x_star, model.recipe, n_obs, rng)
    return LikelihoodSpec(obs, model.recipe.std(x_star), model.box)


def nofas_run(model: ForwardModel, config: NoFasConfig, flow: FlowSpec,
              spec: LikelihoodSpec | None = None) -> RunRecord:
    """Train a normalizing flow on ``model``'s posterior with an adaptive surrogate.

    Every ``calib_interval`` iterations ``calib_size`` flow samples are run
    through the true model, pushed into the calibration memory and the
    surrogate is retrained.  Calibrations stop once another batch would
    exceed ``budget``.
    """
    start = time.perf_counter()
    rngs = seed_streams(config.seed)
    if spec is None:
        spec = make_likelihood(model, config.n_obs, rngs["obs"])
    if config.budget < config.pregrid_size:
        raise ValueError(f"budget {config.budget} below pre-grid size {config.pregrid_size}")
    box = model.box
    log: list[str] = []

    memory = trainer = None
    used = 0
    if config.use_surrogate:
        zp = make_pregrid(box, config.pregrid)
        xp = model.evaluate(zp)
        used = len(zp)
        net = build_surrogate(model.dim, model.out_dim, seed=rngs["surrogate_init"])
        set_standardization(net, xp)
        memory = CalibrationMemory(zp, xp, config.memory)
        trainer = SurrogateTrainer(net, config.surrogate_lr, config.surrogate_decay)
        update_surrogate(trainer, memory, LossWeights(1.0, 0.0), 0, config.surrogate_init_iter)
        f_tensor = net
        weights = LossWeights(config.beta0, config.beta1)
    else:
        f_tensor = model.evaluate_tensor

    stack = init_flow(flow, config.init_scheme, seed=int(rngs["flow_init"].integers(2**31)))
    stack.offset = box.mean(axis=1)  # start the flow over the middle of the prior box
    opt = RMSprop(stack.parameters(), config.lr, config.lr_decay)

    T = config.n_iter
    losses = np.empty(T)
    lrs = np.empty(T)
    ledger = np.empty(T, dtype=np.int64)
    csum = np.zeros(T + 1)
    j = 0
    zk = None
    budget_warned = False
    converged_at = None
    n_done = 0
    for t in range(T):
        if config.use_surrogate and t > 0 and t % config.calib_interval == 0:
            if used + config.calib_size <= config.budget:
                j += 1
                zg = np.clip(acquire_batch(zk, config.calib_size, config.jitter, rngs["acquire"]),
                             box[:, 0], box[:, 1])
                memory.push(j, zg, model.evaluate(zg))
                used += config.calib_size
                update_surrogate(trainer, memory, weights, j, config.surrogate_iter)
            elif not budget_warned:
                msg = f"budget of {config.budget} exhausted at iteration {t}; no further calibrations"
                warnings.warn(msg, BudgetWarning, stacklevel=2)
                log.append(msg)
                budget_warned = True
        lr = opt.lr
        with ad.tape():
            loss, zk = free_energy(stack, spec, f_tensor, config.batch_size, rngs["flow"], "train")
        value = loss.item()
        if not np.isfinite(value):
            raise InferenceError(f"non-finite loss at iteration {t}; last finite losses "
                                 f"{losses[max(0, t - 5):t].tolist()}")
        opt.step(ad.backward(loss))
        losses[t], lrs[t], ledger[t] = value, lr, used
        csum[t + 1] = csum[t] + value
        n_done = t + 1
        if converged_at is None and n_done >= 2 * config.window:
            if _moving_change(csum, n_done, config.window) < config.threshold:
                converged_at = n_done
                if config.early_stop:
                    break
    losses, lrs, ledger = losses[:n_done], lrs[:n_done], ledger[:n_done]

    with ad.tape():
        _, zs, _ = flow_sample(stack, config.n_samples, rngs["final"], "batch")
    z_latent = zs.data
    z_phys = physical_or_nan(model, z_latent)
    noisy, raw, skipped = posterior_predictive(z_latent, model, seed=rngs["predictive"])

    return RunRecord(
        config=_config_dict(config, flow, model),
        iterations=np.arange(n_done), losses=losses, lrs=lrs, budget_used=ledger,
        samples_latent=z_latent, samples_physical=z_phys,
        param_names=model.param_names, output_names=model.output_names,
        memory=memory, predictive=noisy, predictive_raw=raw, n_skipped=skipped,
        n_calibrations=j, converged_at=converged_at, warnings=log,
        wall_time=time.perf_counter() - start)


def physical_or_nan(model: ForwardModel, z: np.ndarray) -> np.ndarray:
    """Physical parameters per sample; rows outside the latent domain become NaN."""
    try:
        return model.to_physical(z)
    except DomainError:
        out = np.full_like(z, np.nan)
        for i, zi in enumerate(z):
            try:
                out[i] = model.to_physical(zi)
            except DomainError:
                pass
        return out


def _config_dict(config: NoFasConfig, flow: FlowSpec, model: ForwardModel) -> dict:
    d = {"model": model.name}
    d.update({f"flow_{k}": v for k, v in asdict(flow).items()})
    d.update(asdict(config))
    return d


__all__ = [
    "LikelihoodSpec", "seed_streams", "physical_or_nan", "project_to_box",
    "log_likelihood", "log_likelihood_tensor", "log_prior", "log_prior_tensor",
    "free_energy", "convergence_detector", "NoFasConfig", "RunRecord", "posterior_predictive",
    "nofas_run", "make_likelihood", "InferenceError", "BudgetWarning",
]

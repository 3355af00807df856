"""Run one experiment or a parameter sweep and write figure-ready CSV output."""
from __future__ import annotations

import csv
import itertools
import os
import time
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from nofas.baselines import BbviConfig, MhConfig, bbvi_run, make_log_joint_tensor, make_log_target, mh_run, gelman_rubin
from nofas.config import ExperimentConfig, SweepSpec, dump_config, format_value
from nofas.engine import (
    NoFasConfig,
    RunRecord,
    convergence_detector,
    make_likelihood,
    nofas_run,
    physical_or_nan,
    posterior_predictive,
    seed_streams,
)
from nofas.flows import FlowSpec
from nofas.models import ForwardModel, get_model
from nofas.surrogate import fit_surrogate

OUTPUT_ENV = "NOFAS_OUTPUT_ROOT"
DEFAULT_ROOT = "runs"
TAIL_FRACTION = 0.8  # loss spread is measured after 80% of T_F (iteration 20000 of 25001)


@dataclass
class ExperimentResult:
    status: int
    run_dir: Path
    record: RunRecord | None = None
    error: str | None = None


def output_root(cfg: ExperimentConfig, override=None) -> Path:
    """``override``, else the config's ``out``, else ``$NOFAS_OUTPUT_ROOT``, else ``./runs``."""
    return Path(override or cfg.out or os.environ.get(OUTPUT_ENV) or DEFAULT_ROOT)


def new_run_dir(root: Path, name: str) -> Path:
    """Create ``root/name-NNN`` with the first unused index; existing runs are never reused."""
    root.mkdir(parents=True, exist_ok=True)
    for k in itertools.count(1):
        path = root / f"{name}-{k:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue


# --- settings translation ---------------------------------------------------------------------

def flow_spec(cfg: ExperimentConfig, dim: int) -> FlowSpec:
    return FlowSpec(dim, cfg.flow_kind, cfg.flow_layers, cfg.flow_hidden, cfg.flow_batchnorm)


def nofas_settings(cfg: ExperimentConfig) -> NoFasConfig:
    """Engine settings; the fixed-surrogate method spends the budget on ``fixed_grid`` and never calibrates."""
    common = dict(
        batch_size=cfg.batch_size, calib_size=cfg.calib_size, memory=cfg.memory, beta0=cfg.beta0,
        beta1=cfg.beta1, n_iter=cfg.n_iter, surrogate_iter=cfg.surrogate_iter,
        surrogate_init_iter=cfg.surrogate_init_iter, lr=cfg.lr, lr_decay=cfg.lr_decay,
        surrogate_lr=cfg.surrogate_lr, surrogate_decay=cfg.surrogate_decay, jitter=cfg.jitter,
        n_obs=cfg.n_obs, n_samples=cfg.n_samples, use_surrogate=cfg.use_surrogate,
        early_stop=cfg.early_stop, window=cfg.window, threshold=cfg.threshold,
        init_scheme=cfg.init_scheme, seed=cfg.seed,
    )
    if cfg.method == "fixed-surrogate":
        return NoFasConfig(pregrid=cfg.fixed_grid, budget=int(np.prod(cfg.fixed_grid)),
                           calib_interval=cfg.n_iter + 1, **common)
    return NoFasConfig(pregrid=cfg.pregrid, budget=cfg.budget, calib_interval=cfg.calib_interval, **common)


def _config_record(cfg: ExperimentConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "out"}


def _dense_surrogate(cfg: ExperimentConfig, model: ForwardModel, rng):
    """Surrogate trained once on the ``mh_grid`` tensor grid (pre-grid only)."""
    trainer, memory = fit_surrogate(model.evaluate, model.box, cfg.mh_grid, seed=rng,
                                    n_iter=cfg.surrogate_init_iter, lr=cfg.surrogate_lr,
                                    gamma=cfg.surrogate_decay)
    return trainer.net, memory.n_evaluations


def _subsample(z: np.ndarray, n: int) -> np.ndarray:
    if len(z) <= n:
        return z
    return z[np.linspace(0, len(z) - 1, n).round().astype(int)]


def _sample_record(cfg, model, z, rngs, **kw) -> RunRecord:
    noisy, raw, skipped = posterior_predictive(_subsample(z, cfg.n_samples), model, seed=rngs["predictive"])
    empty = np.zeros(0)
    base = dict(iterations=empty.astype(int), losses=empty, lrs=empty, budget_used=empty.astype(int))
    base.update(kw)
    return RunRecord(config=_config_record(cfg), samples_latent=z, samples_physical=physical_or_nan(model, z),
                     param_names=model.param_names, output_names=model.output_names,
                     predictive=noisy, predictive_raw=raw, n_skipped=skipped, **base)


def _run_mh(cfg: ExperimentConfig, model: ForwardModel):
    rngs = seed_streams(cfg.seed)
    spec = make_likelihood(model, cfg.n_obs, rngs["obs"])
    start = time.perf_counter()
    if cfg.mh_grid:
        net, n_true = _dense_surrogate(cfg, model, rngs["surrogate_init"])
        f = net.predict
    else:
        f, n_true = model.evaluate, None
    mh = MhConfig(proposal_var=cfg.mh_proposal_var, n_iter=cfg.mh_iter, burn_in=cfg.mh_burn_in,
                  thin=cfg.mh_thin, n_chains=cfg.mh_chains, seed=int(rngs["flow"].integers(2**31)),
                  box=model.box)
    res = mh_run(make_log_target(f, spec), model.dim, mh)
    if n_true is None:
        n_true = cfg.mh_chains * (cfg.mh_iter + 1)
    record = _sample_record(cfg, model, res.samples, rngs, wall_time=time.perf_counter() - start)
    extra = {
        "acceptance_rate": res.acceptance_rate,
        "acceptance_per_chain": tuple(res.acceptance),
        "gelman_rubin": tuple(gelman_rubin(res.chains)),
        "retained_samples": res.samples.shape[0],
        "true_model_evaluations": n_true,
        "target": "dense-grid surrogate" if cfg.mh_grid else "true model",
    }
    return record, extra, res


def _run_bbvi(cfg: ExperimentConfig, model: ForwardModel):
    rngs = seed_streams(cfg.seed)
    spec = make_likelihood(model, cfg.n_obs, rngs["obs"])
    start = time.perf_counter()
    if cfg.mh_grid or not model.differentiable:
        net, n_true = _dense_surrogate(cfg, model, rngs["surrogate_init"])
        f_tensor, target = net, "dense-grid surrogate"
    else:
        f_tensor, n_true, target = model.evaluate_tensor, None, "true model"
    bb = BbviConfig(n_iter=cfg.bbvi_iter, n_mc=cfg.bbvi_mc, lr=cfg.bbvi_lr, lr_decay=cfg.bbvi_decay,
                    seed=int(rngs["flow"].integers(2**31)), init_mean=model.box.mean(axis=1))
    res = bbvi_run(make_log_joint_tensor(f_tensor, spec), model.dim, bb)
    if n_true is None:
        n_true = cfg.bbvi_iter * cfg.bbvi_mc
    z = res.sample(cfg.n_samples, rngs["final"])
    t = np.arange(cfg.bbvi_iter)
    record = _sample_record(cfg, model, z, rngs, iterations=t, losses=-res.elbo,
                            lrs=cfg.bbvi_lr * cfg.bbvi_decay ** t,
                            budget_used=np.zeros(cfg.bbvi_iter, dtype=int),
                            wall_time=time.perf_counter() - start)
    extra = {
        "variational_mean": tuple(res.mean),
        "variational_std": tuple(res.std),
        "posterior_correlation": "identity (mean-field family: zero cross-correlation by construction)",
        "final_elbo": float(res.elbo[-1]),
        "true_model_evaluations": n_true,
        "target": target,
    }
    return record, extra, res


def execute(cfg: ExperimentConfig):
    """Run the configured method; returns ``(RunRecord, summary extras, raw result)``."""
    model = get_model(cfg.model)
    if cfg.method in ("nofas", "fixed-surrogate"):
        rec = nofas_run(model, nofas_settings(cfg), flow_spec(cfg, model.dim))
        extra = {
            "final_loss": float(rec.losses[-1]),
            "true_model_evaluations": rec.total_evaluations,
            "calibrations": rec.n_calibrations,
            "converged_at": rec.converged_at if rec.converged_at is not None else "never",
        }
        return rec, extra, rec
    if cfg.method == "mh":
        return _run_mh(cfg, model)
    return _run_bbvi(cfg, model)


# --- summaries ---------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def summary_lines(cfg: ExperimentConfig, record: RunRecord, extra: dict) -> list[str]:
    z, x = record.samples_latent, record.samples_physical
    ok = ~np.isnan(x).any(axis=1)
    lines = [
        "status: ok",
        f"model: {cfg.model}",
        f"method: {cfg.method}",
        f"seed: {cfg.seed}",
        f"parameters: {', '.join(record.param_names)}",
        f"posterior_samples: {len(z)}",
        f"posterior_mean_latent: {_fmt(z.mean(axis=0))}",
        f"posterior_std_latent: {_fmt(z.std(axis=0))}",
        f"posterior_mean_physical: {_fmt(x[ok].mean(axis=0))}",
        f"posterior_std_physical: {_fmt(x[ok].std(axis=0))}",
    ]
    if "posterior_correlation" not in extra:
        corr = np.corrcoef(z.T) if z.shape[1] > 1 else np.ones((1, 1))
        lines.append("posterior_correlation: " + "; ".join(_fmt(row) for row in corr))
    for key, value in extra.items():
        lines.append(f"{key}: {_fmt(value)}")
    if record.predictive is not None:
        lo, hi = np.percentile(record.predictive, [2.5, 97.5], axis=0)
        lines.append(f"predictive_2.5%: {_fmt(lo)}")
        lines.append(f"predictive_97.5%: {_fmt(hi)}")
        lines.append(f"predictive_skipped: {record.n_skipped}")
    lines.append(f"wall_time_s: {record.wall_time:.3f}")
    for w in record.warnings:
        lines.append(f"warning: {w}")
    return lines


def run_experiment(cfg: ExperimentConfig, out=None) -> ExperimentResult:
    """Run ``cfg`` in a fresh run directory; never raises for run-time failures.

    On failure the exit status is 1 and ``summary.txt`` carries the error.
    """
    run_dir = new_run_dir(output_root(cfg, out), f"{cfg.model}-{cfg.method}-seed{cfg.seed}")
    (run_dir / "config.resolved").write_text(dump_config(cfg))
    try:
        record, extra, raw = execute(cfg)
        record.write(run_dir)
        if cfg.method == "mh":
            raw.write_chains(run_dir / "chains.csv", record.param_names)
        (run_dir / "summary.txt").write_text("\n".join(summary_lines(cfg, record, extra)) + "\n")
        return ExperimentResult(0, run_dir, record)
    except Exception as err:  # noqa: BLE001 - any abort is reported, not raised
        message = f"{type(err).__name__}: {err}"
        (run_dir / "summary.txt").write_text(
            f"status: failed\nmodel: {cfg.model}\nmethod: {cfg.method}\nseed: {cfg.seed}\n"
            f"error: {message}\n\n{traceback.format_exc()}")
        return ExperimentResult(1, run_dir, None, message)


# --- sweeps -----------------------------------------------------------------------------------------

SWEEP_COLUMNS = ("final_loss", "converged_at", "loss_std_tail", "status")


def cell_metrics(losses: np.ndarray, window: int, threshold: float) -> tuple[float, int | None, float]:
    """Final loss, detector iteration and loss spread over the last 20% of the trace."""
    conv = convergence_detector(losses, window, threshold)
    tail = losses[int(TAIL_FRACTION * len(losses)):]
    return float(losses[-1]), conv, float(np.std(tail))


def sweep_cells(spec: SweepSpec):
    keys = list(spec.vary)
    for values in itertools.product(*(spec.vary[k] for k in keys)):
        for r in range(spec.repeats):
            cell = dict(zip(keys, values))
            yield cell, r, replace(spec.base, seed=spec.base.seed + r, **cell)


def run_sweep(spec: SweepSpec, out=None) -> tuple[Path, list[dict]]:
    """Run every cell of ``spec`` with the NoFAS engine and write ``sweep.csv``.

    Failed cells are recorded with their error and the sweep carries on.
    """
    base = spec.base
    sweep_dir = new_run_dir(output_root(base, out), f"sweep-{base.model}")
    vary_lines = "".join(f"vary.{k} = {format_value(tuple(v))}\n" for k, v in spec.vary.items())
    (sweep_dir / "sweep.resolved").write_text(dump_config(base) + vary_lines + f"repeats = {spec.repeats}\n")
    keys = list(spec.vary)
    header = [*keys, "repeat", "seed", *SWEEP_COLUMNS]
    rows = []
    model = get_model(base.model)
    with open(sweep_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cell, r, cfg in sweep_cells(spec):
            row = {**cell, "repeat": r, "seed": cfg.seed}
            try:
                rec = nofas_run(model, nofas_settings(cfg), flow_spec(cfg, model.dim))
                final, conv, spread = cell_metrics(rec.losses, cfg.window, cfg.threshold)
                row.update(final_loss=final, converged_at=conv, loss_std_tail=spread, status="ok")
            except Exception as err:  # noqa: BLE001 - per-cell failures are data
                row.update(final_loss=float("nan"), converged_at=None, loss_std_tail=float("nan"),
                           status=f"failed: {type(err).__name__}: {err}")
            rows.append(row)
            writer.writerow([_csv_value(row[h]) for h in header])
            fh.flush()
    return sweep_dir, rows


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


__all__ = [
    "ExperimentResult", "OUTPUT_ENV", "output_root", "new_run_dir", "flow_spec", "nofas_settings",
    "execute", "run_experiment", "run_sweep", "sweep_cells", "cell_metrics", "summary_lines",
]

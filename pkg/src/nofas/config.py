"""Flat ``key = value`` experiment configuration with per-model defaults."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import get_type_hints

from nofas.flows import INIT_SCHEMES
from nofas.models import MODEL_NAMES

MODEL_DIMS = {"closed_form": 2, "rc": 2, "rcr": 3, "sobol": 5}
METHODS = ("nofas", "fixed-surrogate", "mh", "bbvi")
SWEEPABLE = ("beta0", "beta1", "init_scheme", "batch_size")


class ConfigError(ValueError):
    """Malformed configuration; ``line`` is the 1-based offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    method: str = "nofas"
    seed: int = 0
    out: str = ""
    # flow architecture
    flow_kind: str = "realnvp"
    flow_layers: int = 5
    flow_hidden: int = 100
    flow_batchnorm: bool = True
    init_scheme: str = "glorot-uniform"
    # NoFAS loop
    batch_size: int = 200
    calib_interval: int = 1000
    calib_size: int = 2
    memory: int = 20
    beta0: float = 0.5
    beta1: float = 0.1
    n_iter: int = 25001
    lr: float = 0.002
    lr_decay: float = 0.9999
    budget: int = 64
    pregrid: tuple[int, ...] = (4, 4)
    fixed_grid: tuple[int, ...] = (8, 8)
    surrogate_iter: int = 1000
    surrogate_init_iter: int = 5000
    surrogate_lr: float = 0.003
    surrogate_decay: float = 0.995
    jitter: float = 0.1
    use_surrogate: bool = True
    n_obs: int = 50
    n_samples: int = 5000
    early_stop: bool = False
    window: int = 100
    threshold: float = 0.0005
    # Metropolis-Hastings
    mh_proposal_var: tuple[float, ...] = (0.01, 0.01)
    mh_iter: int = 4_000_000
    mh_burn_in: float = 0.1
    mh_thin: int = 1000
    mh_chains: int = 4
    mh_grid: tuple[int, ...] = ()
    # BBVI
    bbvi_iter: int = 10000
    bbvi_mc: int = 50
    bbvi_lr: float = 0.01
    bbvi_decay: float = 0.9999

    def __post_init__(self) -> None:
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {', '.join(MODEL_NAMES)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.flow_kind not in ("maf", "realnvp"):
            raise ConfigError(f"unknown flow_kind {self.flow_kind!r}; expected maf or realnvp")
        d = MODEL_DIMS[self.model]
        for key in ("pregrid", "fixed_grid"):
            if len(getattr(self, key)) != d:
                raise ConfigError(f"{key} needs {d} entries for model {self.model}")
        if len(self.mh_grid) not in (0, d):
            raise ConfigError(f"mh_grid needs 0 or {d} entries for model {self.model}")
        if len(self.mh_proposal_var) not in (1, d):
            raise ConfigError(f"mh_proposal_var needs 1 or {d} entries for model {self.model}")


# Per-model NoFAS hyperparameters and MH settings.
MODEL_DEFAULTS: dict[str, dict] = {
    "closed_form": dict(flow_kind="realnvp", flow_layers=5, batch_size=200, budget=64, calib_size=2,
                        calib_interval=1000, lr=0.002, pregrid=(4, 4), fixed_grid=(8, 8),
                        mh_proposal_var=(0.01, 0.01), mh_iter=4_000_000, mh_thin=1000, mh_grid=()),
    "rc": dict(flow_kind="maf", flow_layers=5, batch_size=250, budget=64, calib_size=2,
               calib_interval=1000, lr=0.003, pregrid=(4, 4), fixed_grid=(8, 8),
               mh_proposal_var=(0.01, 0.1), mh_iter=2_000_000, mh_thin=1000, mh_grid=(30, 30)),
    "rcr": dict(flow_kind="maf", flow_layers=15, batch_size=500, budget=216, calib_size=2,
                calib_interval=300, lr=0.003, pregrid=(4, 4, 4), fixed_grid=(6, 6, 6),
                mh_proposal_var=(0.025,) * 3, mh_iter=4_000_000, mh_thin=2000, mh_grid=(20, 20, 20)),
    "sobol": dict(flow_kind="realnvp", flow_layers=15, batch_size=250, budget=1023, calib_size=12,
                  calib_interval=250, lr=0.0005, pregrid=(3,) * 5, fixed_grid=(4,) * 5,
                  mh_proposal_var=(0.03,) * 5, mh_iter=600_000_000, mh_thin=100_000, mh_grid=()),
}

FAST_ITER = 3000


def default_config(model: str, **overrides) -> ExperimentConfig:
    model = normalize_model(model)
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {model!r}; expected one of {', '.join(MODEL_NAMES)}")
    return ExperimentConfig(model=model, **{**MODEL_DEFAULTS[model], **overrides})


def normalize_model(name: str) -> str:
    return name.strip().replace("-", "_")


def fast_profile(cfg: ExperimentConfig) -> ExperimentConfig:
    """Reduced-scale variant: ``T_F = 3000``, half-size batches, proportionally shorter runs.

    The calibration interval shrinks with ``T_F`` so the same number of
    calibrations (and the same budget) fits in the shorter run.
    """
    scale = FAST_ITER / cfg.n_iter
    if scale >= 1:
        return cfg
    return replace(
        cfg,
        n_iter=FAST_ITER,
        batch_size=max(cfg.batch_size // 2, 2 * cfg.calib_size, 16),
        calib_interval=max(1, int(cfg.calib_interval * scale)),
        surrogate_iter=max(50, cfg.surrogate_iter // 2),
        surrogate_init_iter=max(200, cfg.surrogate_init_iter // 2),
        n_samples=min(cfg.n_samples, 2000),
        mh_iter=min(cfg.mh_iter, 200_000),
        mh_thin=min(cfg.mh_thin, 100),
        mh_grid=tuple(min(n, 12) for n in cfg.mh_grid),
        bbvi_iter=min(cfg.bbvi_iter, FAST_ITER),
    )


# --- parsing -------------------------------------------------------------------------------------

_HINTS = get_type_hints(ExperimentConfig)


def _parse_value(key: str, text: str, line: int | None):
    hint = _HINTS[key]
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if hint is int:
            v = float(text)
            if not v.is_integer():
                raise ValueError
            return int(v)
        if hint is float:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
        if hint is str:
            if not text or key == "init_scheme" and text not in INIT_SCHEMES:
                raise ValueError
            return text
        # tuples
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = hint.__args__[0]
        vals = [float(p) for p in parts]
        if elem is int:
            if not all(v.is_integer() for v in vals):
                raise ValueError
            return tuple(int(v) for v in vals)
        return tuple(vals)
    except (ValueError, AttributeError):
        raise ConfigError(f"malformed value for {key}: {text!r}", line) from None


def parse_pairs(text: str) -> list[tuple[int, str, str]]:
    """``(line, key, value)`` triples from flat ``key = value`` text (``#`` starts a comment)."""
    pairs = []
    seen: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", n)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError("missing key", n)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", n)
        seen[key] = n
        pairs.append((n, key, value))
    return pairs


def config_from_pairs(pairs, extra_keys: tuple[str, ...] = ()) -> tuple[ExperimentConfig, dict]:
    """Resolve parsed pairs against the per-model defaults.

    Keys listed in ``extra_keys`` (or starting with one of them) are returned
    separately as ``{key: (line, raw value)}`` instead of being rejected.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    model_line = next(((n, v) for n, k, v in pairs if k == "model"), None)
    if model_line is None:
        raise ConfigError("missing required key 'model'")
    n, model = model_line
    model = normalize_model(model)
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {model!r}; expected one of {', '.join(MODEL_NAMES)}", n)
    values: dict = {}
    extras: dict = {}
    for n, key, raw in pairs:
        if key == "model":
            continue
        if any(key == e or key.startswith(e) for e in extra_keys):
            extras[key] = (n, raw)
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", n)
        if key == "method":
            raw = raw.replace("_", "-")
            if raw not in METHODS:
                raise ConfigError(f"unknown method {raw!r}; expected one of {', '.join(METHODS)}", n)
        values[key] = _parse_value(key, raw, n)
    try:
        cfg = default_config(model, **values)
    except ConfigError as err:
        raise ConfigError(str(err), model_line[0]) from None
    return cfg, extras


def parse_config(text: str) -> ExperimentConfig:
    return config_from_pairs(parse_pairs(text))[0]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the same format ``load_config`` reads."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "out" and not v:
            continue
        lines.append(f"{f.name} = {format_value(v)}".rstrip() + "\n")
    return "".join(lines)


# --- sweeps ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """Grid of values for up to several sweepable keys, each cell repeated ``repeats`` times."""

    base: ExperimentConfig
    vary: dict
    repeats: int = 1

    def __post_init__(self) -> None:
        if not self.vary:
            raise ConfigError("a sweep needs at least one 'vary.<key>' line")
        for key, vals in self.vary.items():
            if key not in SWEEPABLE:
                raise ConfigError(f"cannot sweep {key!r}; sweepable keys are {', '.join(SWEEPABLE)}")
            if not vals:
                raise ConfigError(f"empty value list for {key!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


def parse_sweep(text: str) -> SweepSpec:
    cfg, extras = config_from_pairs(parse_pairs(text), extra_keys=("vary.", "repeats"))
    vary: dict = {}
    repeats = 1
    for key, (n, raw) in extras.items():
        if key == "repeats":
            repeats = _parse_value("n_iter", raw, n)
            continue
        name = key[len("vary."):]
        if name not in SWEEPABLE:
            raise ConfigError(f"cannot sweep {name!r}; sweepable keys are {', '.join(SWEEPABLE)}", n)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ConfigError(f"empty value list for {name!r}", n)
        vary[name] = tuple(_parse_value(name, s, n) for s in items)
    return SweepSpec(cfg, vary, repeats)


def load_sweep(path) -> SweepSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"sweep file not found: {path}")
    return parse_sweep(path.read_text())


__all__ = [
    "ConfigError", "ExperimentConfig", "SweepSpec", "METHODS", "SWEEPABLE", "MODEL_DEFAULTS",
    "default_config", "fast_profile", "parse_config", "load_config", "dump_config",
    "parse_sweep", "load_sweep", "normalize_model",
]

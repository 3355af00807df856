"""Windkessel (RC and RCR) lumped-parameter circuits driven by a periodic inflow.

Pressures are integrated in Barye and reported in mmHg.  Evaluation is
vectorised over a batch of parameter vectors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

MMHG = 1333.22  # Barye per mmHg
DISTAL_PRESSURE_MMHG = 55.0
RESISTANCE_BOUNDS = (100.0, 1500.0)   # Barye s / ml
CAPACITANCE_BOUNDS = (1e-5, 1e-2)     # ml / Barye


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Waveform:
    """One cycle of inflow samples, extended periodically with linear interpolation."""

    times: np.ndarray
    flows: np.ndarray
    period: float

    def __post_init__(self) -> None:
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waveform times must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] > self.period:
            raise ValueError("waveform times must lie within one period")

    def __call__(self, t):
        return np.interp(np.mod(t, self.period), self.times, self.flows, period=self.period)

    def mean_flow(self, n: int = 1000) -> float:
        return float(np.mean(self(np.arange(n) * self.period / n)))


def load_waveform(path: str | Path | None = None, period: float | None = None) -> Waveform:
    """Read a ``time_s, flow_ml_s`` CSV (header row required).

    Without ``period`` the last sample is taken to close the cycle, i.e. it
    must repeat the first flow value.
    """
    if path is None:
        text = resources.files("nofas.models").joinpath("data/inflow.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.reader(line for line in text.splitlines() if line.strip()))
    header = [h.strip() for h in rows[0]]
    if header != ["time_s", "flow_ml_s"]:
        raise ValueError(f"waveform CSV header must be 'time_s, flow_ml_s', got {header}")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    times, flows = data[:, 0], data[:, 1]
    if period is None:
        period = float(times[-1] - times[0])
        times, flows = times[:-1] - times[0], flows[:-1]
    return Waveform(times, flows, period)


def rk4_integrate(rhs: Callable, y0, t0: float, t1: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4 from ``t0`` to ``t1``; the last step is shortened.

    Returns ``(times, states)`` with ``states[k]`` the state at ``times[k]``.
    """
    if dt <= 0 or t1 <= t0:
        raise ValueError(f"need dt > 0 and t1 > t0 (got dt={dt}, t0={t0}, t1={t1})")
    n_full = int(np.floor((t1 - t0) / dt + 1e-9))
    times = t0 + dt * np.arange(n_full + 1)
    if t1 - times[-1] > 1e-12 * max(1.0, abs(t1)):
        times = np.append(times, t1)
    else:
        times[-1] = t1
    y = np.array(y0, dtype=np.float64)
    states = np.empty((len(times), *y.shape))
    states[0] = y
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={times[k + 1]:.6g}")
        states[k + 1] = y
    return times, states


def _check_bounds(name: str, values: np.ndarray, bounds: tuple[float, float]) -> None:
    lo, hi = bounds
    if np.any(values < lo * (1 - 1e-12)) or np.any(values > hi * (1 + 1e-12)):
        raise ValueError(f"{name} outside [{lo:g}, {hi:g}]: {values[(values < lo) | (values > hi)][:3]}")


class _Circuit:
    """Shared periodic-steady-state driver: start on the periodic orbit, then
    integrate ``n_cycles`` cycles and verify the last two agree."""

    n_cycles = 10
    steps_per_cycle = 1000
    tol_mmhg = 0.1

    def __init__(self, waveform: Waveform | None = None) -> None:
        self.waveform = waveform or load_waveform()

    def _periodic_start(self, rhs, y0, rate) -> np.ndarray:
        """Fixed point of the one-cycle RK4 map for ``dy/dt = rate*y + forcing(t)``.

        The discrete map is affine, ``y(T) = phi*y(0) + psi`` with
        ``phi = P(h*rate)**N`` and ``P`` the RK4 stability polynomial, so one
        cycle from ``y0`` determines ``psi`` and the periodic state.
        """
        T = self.waveform.period
        h = T / self.steps_per_cycle
        _, states = rk4_integrate(rhs, y0, 0.0, T, h)
        x = h * rate
        phi = (1 + x + x**2 / 2 + x**3 / 6 + x**4 / 24) ** self.steps_per_cycle
        psi = states[-1] - phi * y0
        return psi / (1.0 - phi)

    def _pressures(self, rhs, y0, proximal, rate) -> np.ndarray:
        T = self.waveform.period
        dt = T / self.steps_per_cycle
        y0 = self._periodic_start(rhs, y0, rate)
        times, states = rk4_integrate(rhs, y0, 0.0, self.n_cycles * T, dt)
        n = self.steps_per_cycle
        last = slice(len(times) - 1 - n, len(times) - 1)
        prev = slice(len(times) - 1 - 2 * n, len(times) - 1 - n)
        p_last = proximal(times[last], states[last])
        p_prev = proximal(times[prev], states[prev])
        drift = np.max(np.abs(p_last - p_prev), axis=0) / MMHG
        if np.any(drift > self.tol_mmhg):
            raise IntegrationError(
                f"no periodic steady state after {self.n_cycles} cycles "
                f"(max cycle-to-cycle change {drift.max():.3g} mmHg)")
        p = p_last / MMHG
        return np.stack([p.min(axis=0), p.max(axis=0), p.mean(axis=0)], axis=-1)


class RCCircuit(_Circuit):
    """Two-element Windkessel: ``dP/dt = (Q_p - (P - P_d)/R) / C``."""

    def __call__(self, params) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        R, C = params[:, 0], params[:, 1]
        _check_bounds("R", R, RESISTANCE_BOUNDS)
        _check_bounds("C", C, CAPACITANCE_BOUNDS)
        pd = DISTAL_PRESSURE_MMHG * MMHG
        q = self.waveform

        def rhs(t, p):
            return (q(t) - (p - pd) / R) / C

        y0 = pd + R * q.mean_flow()
        return self._pressures(rhs, y0, lambda t, p: p, -1.0 / (R * C))


class RCRCircuit(_Circuit):
    """Three-element Windkessel; ``P_p = P_c + R_p Q_p`` with capacitor pressure ``P_c``."""

    def __call__(self, params) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        Rp, Rd, C = params[:, 0], params[:, 1], params[:, 2]
        _check_bounds("Rp", Rp, RESISTANCE_BOUNDS)
        _check_bounds("Rd", Rd, RESISTANCE_BOUNDS)
        _check_bounds("C", C, CAPACITANCE_BOUNDS)
        pd = DISTAL_PRESSURE_MMHG * MMHG
        q = self.waveform

        def rhs(t, pc):
            return (q(t) - (pc - pd) / Rd) / C

        y0 = pd + Rd * q.mean_flow()
        return self._pressures(rhs, y0, lambda t, pc: pc + Rp * q(t)[:, None], -1.0 / (Rd * C))

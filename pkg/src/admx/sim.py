"""Averaged dq-frame time-domain simulator of the microgrid.

All units and the grid branch are integrated together with fixed-step RK4 in
a common frame aligned with the infinite bus.  Scenarios carry timed events
(command ramps, current-loop gain modulation, voltage-loop retuning) and the
simulator starts from the steady state of the configured nominal commands.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import root

from . import _kernels as K
from .analytic import equilibrium_state, pack_params, state_labels, state_scale
from .config import (ConfigError, DispatchCommand, MicrogridConfig, config_from_dict,
                     config_to_dict, per_unit_base)
from .steady import SteadyStateError, solve_system

log = logging.getLogger(__name__)

EVENT_KINDS = ("ramp", "modulate", "modulate_off", "retune")
DEFAULT_RAMP = 0.5
NET_UNIT = "net"


@dataclass(frozen=True)
class Event:
    """A timed scenario event.

    ``ramp``: payload ``p_ref``, ``q_ref`` (p.u.) and optional ``duration`` (s).
    ``modulate``: payload ``delta_a`` (fraction of nominal k_pi) and ``f`` (Hz).
    ``modulate_off``: no payload.  ``retune``: payload ``kpv_scale``.
    """
    t: float
    kind: str
    target: str
    payload: dict = field(default_factory=dict)

    def validate(self, config: MicrogridConfig, duration):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if self.target not in config.ids:
            raise ConfigError(f"event targets unknown unit {self.target!r}")
        if not 0 <= self.t <= duration:
            raise ConfigError(f"event time {self.t} outside [0, {duration}]")
        if self.kind == "ramp":
            DispatchCommand(self.payload["p_ref"], self.payload["q_ref"]).validate(f"{self.target}: ")
            if self.payload.get("duration", DEFAULT_RAMP) < 0:
                raise ConfigError("ramp duration must be non-negative")
        elif self.kind == "modulate":
            if not self.payload.get("f", 0) > 0:
                raise ConfigError("modulation frequency must be positive")
        elif self.kind == "retune":
            if not self.payload.get("kpv_scale", 0) > 0:
                raise ConfigError("kpv_scale must be positive")

    def to_dict(self):
        return {"t": self.t, "kind": self.kind, "target": self.target, "payload": dict(self.payload)}


@dataclass
class SimScenario:
    config: MicrogridConfig
    duration: float
    dt: float = 20e-6
    events: tuple = ()
    record_dt: float = 1e-3
    signals: tuple = None  # None logs everything
    noise_snr_db: float = None
    initial_state: np.ndarray = None

    def validate(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.record_dt < self.dt:
            raise ConfigError("record_dt must be at least dt")
        times = [e.t for e in self.events]
        if times != sorted(times):
            raise ConfigError("events must be sorted by time")
        for e in self.events:
            e.validate(self.config, self.duration)

    @property
    def decimation(self):
        return max(1, int(round(self.record_dt / self.dt)))


def scenario_from_dict(data: dict) -> SimScenario:
    data = dict(data)
    events = [Event(float(e["t"]), e["kind"], e["target"], dict(e.get("payload", {})))
              for e in data.pop("events", [])]
    sim = data.pop("simulation", {})
    cfg = config_from_dict(data)
    sc = SimScenario(cfg, float(sim.get("duration", 2.0)), float(sim.get("dt", 20e-6)),
                     tuple(events), float(sim.get("record_dt", 1e-3)),
                     noise_snr_db=sim.get("noise_snr_db"))
    sc.validate()
    return sc


def load_scenario(path) -> SimScenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(data)


def scenario_to_dict(sc: SimScenario) -> dict:
    out = config_to_dict(sc.config)
    out.pop("events", None)
    out.pop("simulation", None)
    out["simulation"] = {"duration": sc.duration, "dt": sc.dt, "record_dt": sc.record_dt,
                         "noise_snr_db": sc.noise_snr_db}
    out["events"] = [e.to_dict() for e in sc.events]
    return out


class Plant:
    """Packed parameter arrays of a configuration, shared by all solvers."""

    def __init__(self, config: MicrogridConfig, commands=None):
        self.config = config
        commands = list(commands) if commands is not None else config.commands()
        self.commands = commands
        grid = config.grid
        rows, offs, scales = [], [0], []
        for v, c in zip(config.vscs, commands):
            pr, qr = c.physical(v)
            rows.append(pack_params(v, grid, pr, qr))
            offs.append(offs[-1] + (K.N_LCL if v.is_lcl else K.N_LC))
            scales.append(state_scale(v, grid))
        self.params = np.array(rows)
        self.offsets = np.array(offs, dtype=np.int64)
        ctot = sum(v.c_f for v in config.vscs if not v.is_lcl)
        self.grid = np.array([grid.l_g, grid.r_g, grid.u_g, grid.omega_n, ctot])
        s_tot = sum(v.s_rated for v in config.vscs)
        i_base = s_tot / (K.POWER_FACTOR * grid.u_nom)
        self.scale = np.concatenate(scales + [[grid.u_nom, grid.u_nom, i_base, i_base]])
        n = len(commands)
        self.ramps = np.zeros((n, 6))
        self.ramps[:, 0] = self.ramps[:, 1] = -1.0
        self.ramps[:, 2] = self.ramps[:, 3] = self.params[:, K.P_PREF]
        self.ramps[:, 4] = self.ramps[:, 5] = self.params[:, K.P_QREF]
        self.mod = np.array([-1.0, 0.0, 0.0, 0.0])

    @property
    def n_states(self):
        return int(self.offsets[-1]) + 4

    def labels(self):
        out = []
        for v in self.config.vscs:
            out += [f"{v.id}:{s}" for s in state_labels(v)]
        return out + [f"{NET_UNIT}:{s}" for s in K.NET_SIGNALS]

    def rhs(self, x, t=0.0):
        dx = np.empty_like(x)
        aux = np.empty((self.params.shape[0], K.N_AUX))
        K.system_rhs(t, x, self.params, self.offsets, self.grid, self.ramps, self.mod, dx, aux)
        return dx, aux

    def unit_terminals(self, x):
        """Per-unit terminal quantities ``(ud, uq, id, iq)`` in each unit frame."""
        _, aux = self.rhs(x)
        return aux[:, [K.A_UD, K.A_UQ, K.A_ID, K.A_IQ]].copy()


def steady_guess(config: MicrogridConfig, commands=None):
    """Full state assembled from the steady-state mapping (a starting point only)."""
    commands = list(commands) if commands is not None else config.commands()
    state = solve_system(config, commands)
    zg = config.grid.r_g + 1j * config.grid.x_g
    i_tot = sum(complex(o.i_d, o.i_q) * np.exp(-1j * o.angle) for o in state.ops)
    # PCC angle th from u_pcc e^{j th} - zg i_tot e^{j th} = u_g
    th = -np.angle(state.u_pcc - zg * i_tot)
    xs = []
    for v, o in zip(config.vscs, state.ops):
        x, _, _, _ = equilibrium_state(v, config.grid, o)
        x[0] = th - o.angle
        xs.append(x)
    up = state.u_pcc * np.exp(1j * th)
    ig = i_tot * np.exp(1j * th)
    return np.concatenate(xs + [[up.real, up.imag, ig.real, ig.imag]])


def equilibrium(config: MicrogridConfig, commands=None, x0=None, tol=1e-9):
    """Exact equilibrium of the simulator's own equations.

    ``x0`` defaults to the steady-state mapping; the result is what a settled
    simulation converges to.
    """
    plant = Plant(config, commands)
    x0 = steady_guess(config, plant.commands) if x0 is None else np.asarray(x0, dtype=float)
    sc = plant.scale

    def f(z):
        return plant.rhs(z * sc)[0] / (sc * config.grid.omega_n)

    sol = root(f, x0 / sc, method="hybr", options={"xtol": 1e-13})
    res = np.max(np.abs(f(sol.x)))
    if not res < tol:
        raise SteadyStateError(f"no equilibrium found (residual {res:.2e} p.u.)")
    return sol.x * sc


def system_jacobian(config: MicrogridConfig, commands=None, x=None, step=1e-6):
    """State matrix of the whole microgrid at its equilibrium."""
    plant = Plant(config, commands)
    x = equilibrium(config, plant.commands) if x is None else x
    n = x.shape[0]
    a = np.empty((n, n))
    for i in range(n):
        h = step * plant.scale[i]
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        a[:, i] = (plant.rhs(xp)[0] - plant.rhs(xm)[0]) / (2 * h)
    return a, x, plant.labels()


def assembled_admittance(config: MicrogridConfig, commands, freqs, x=None, step=1e-6):
    """Sum of unit admittances (common PCC-voltage frame) from one monolithic linearization.

    All units are linearized together in the common frame, with the PCC
    voltage and its rate as inputs and the total drawn current as output; the
    result is rotated onto the PCC voltage so it compares with the per-unit
    assembly used by the stability module.
    """
    plant = Plant(config, commands)
    x = equilibrium(config, plant.commands) if x is None else x
    nu = int(plant.offsets[-1])
    n_units = plant.params.shape[0]
    u0 = x[nu:nu + 2].copy()

    def f(z):
        xs, u, du = z[:nu], z[nu:nu + 2], z[nu + 2:]
        dx = np.empty(nu)
        aux = np.empty(K.N_AUX)
        out = np.zeros(2)
        for k in range(n_units):
            o0, o1 = plant.offsets[k], plant.offsets[k + 1]
            K.unit_rhs(plant.params[k], xs[o0:o1], u[0], u[1], du[0], du[1], 0.0, dx[o0:o1], aux)
            out -= aux[[K.A_ICD, K.A_ICQ]]
        return np.concatenate([dx, out])

    z0 = np.concatenate([x[:nu], u0, np.zeros(2)])
    scale = np.concatenate([plant.scale[:nu], [config.grid.u_nom] * 2,
                            [config.grid.u_nom * config.grid.omega_n] * 2])
    jac = np.empty((nu + 2, nu + 4))
    for i in range(nu + 4):
        h = step * scale[i]
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        jac[:, i] = (f(zp) - f(zm)) / (2 * h)
    a, bu, bdu = jac[:nu, :nu], jac[:nu, nu:nu + 2], jac[:nu, nu + 2:]
    c, du_, ddu = jac[nu:, :nu], jac[nu:, nu:nu + 2], jac[nu:, nu + 2:]
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    out = np.empty((len(freqs), 2, 2), dtype=complex)
    th = np.arctan2(u0[1], u0[0])
    r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    for k, fk in enumerate(freqs):
        s = 2j * np.pi * fk
        # u_dot perturbation equals s * du in the rotating frame
        bt = bu + s * bdu
        y = c @ np.linalg.solve(s * np.eye(nu) - a, bt) + du_ + s * ddu
        out[k] = r.T @ y @ r
    return out


@dataclass
class SimTrace:
    """Uniformly sampled logs.  ``data[(unit, signal)]`` is an array over ``time``."""
    time: np.ndarray
    units: tuple
    data: dict
    diverged: bool = False
    t_end: float = None
    omega_n: float = 2 * np.pi * 50
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.time)
        for key, arr in self.data.items():
            if len(arr) != n:
                raise ValueError(f"signal {key} has {len(arr)} samples, time has {n}")

    @property
    def fs(self):
        return 1.0 / (self.time[1] - self.time[0])

    def get(self, unit, signal=None):
        if signal is None:
            unit, signal = unit.split(":", 1)
        return self.data[(unit, signal)]

    def freq_deviation(self, unit):
        """Frequency deviation in Hz."""
        return (self.get(unit, "omega") - self.omega_n) / (2 * np.pi)

    def window(self, t0=None, t1=None):
        t0 = self.time[0] if t0 is None else t0
        t1 = self.time[-1] if t1 is None else t1
        return (self.time >= t0 - 1e-12) & (self.time <= t1 + 1e-12)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "unit", "signal", "value"])
            for (unit, sig), arr in self.data.items():
                for t, v in zip(self.time, arr):
                    w.writerow([f"{t:.9g}", unit, sig, repr(float(v))])

    @classmethod
    def from_csv(cls, path, omega_n=2 * np.pi * 50):
        cols = {}
        times = {}
        with open(path, newline="") as fh:
            r = csv.DictReader(fh)
            for row in r:
                key = (row["unit"], row["signal"])
                cols.setdefault(key, []).append(float(row["value"]))
                times.setdefault(key, []).append(float(row["time"]))
        if not cols:
            raise ValueError(f"{path}: empty trace")
        first = next(iter(times))
        units = tuple(dict.fromkeys(u for u, _ in cols if u != NET_UNIT))
        return cls(np.array(times[first]), units, {k: np.array(v) for k, v in cols.items()},
                   omega_n=omega_n)


def _add_noise(data, snr_db, rng):
    out = {}
    for key, arr in data.items():
        ac = arr - arr.mean()
        rms = np.sqrt(np.mean(ac ** 2))
        if rms == 0:
            rms = np.sqrt(np.mean(arr ** 2))
        sigma = rms / 10 ** (snr_db / 20)
        out[key] = arr + rng.normal(0.0, sigma, arr.shape) if sigma > 0 else arr.copy()
    return out


def run(scenario: SimScenario, seed: int = 0) -> SimTrace:
    """Integrate a scenario; divergence is flagged on the trace, never raised."""
    scenario.validate()
    cfg = scenario.config
    plant = Plant(cfg)
    if scenario.initial_state is not None:
        x = np.array(scenario.initial_state, dtype=float)
        if x.shape != (plant.n_states,):
            raise ConfigError(f"initial state must have {plant.n_states} entries")
    else:
        x = equilibrium(cfg)
    nominal = plant.params.copy()
    dt = scenario.dt
    decim = scenario.decimation
    n_total = int(round(scenario.duration / dt))
    n_rows = n_total // decim + 1
    n_units = len(cfg.vscs)
    width = n_units * K.N_USIG + len(K.NET_SIGNALS)
    logbuf = np.full((n_rows, width), np.nan)

    # events are snapped onto the logging grid so segments join cleanly
    grid_dt = dt * decim
    boundaries = []
    for e in scenario.events:
        step = int(round(e.t / grid_dt)) * decim
        if abs(step * dt - e.t) > 1e-9:
            log.debug("event at %.6f s snapped to %.6f s", e.t, step * dt)
        boundaries.append((min(step, n_total), e))

    row = 0
    step = 0
    diverged = False
    ev_idx = 0
    while True:
        while ev_idx < len(boundaries) and boundaries[ev_idx][0] <= step:
            _apply_event(plant, nominal, boundaries[ev_idx][1], step * dt)
            ev_idx += 1
        next_step = boundaries[ev_idx][0] if ev_idx < len(boundaries) else n_total
        seg = next_step - step
        seg_rows = seg // decim + 1
        buf = np.empty((seg_rows, width))
        x, got, bad = K.integrate(x, step * dt, dt, seg, plant.params, plant.offsets, plant.grid,
                                  plant.ramps, plant.mod, plant.scale, decim, buf)
        # row 0 of every segment repeats the previous segment's last row
        skip = 0 if row == 0 else 1
        take = got - skip
        logbuf[row:row + take] = buf[skip:got]
        row += take
        if bad:
            diverged = True
            break
        step = next_step
        if step >= n_total:
            break

    t_end = (row - 1) * grid_dt
    time = np.arange(row) * grid_dt
    data = {}
    for k, v in enumerate(cfg.vscs):
        for j, name in enumerate(K.UNIT_SIGNALS):
            data[(v.id, name)] = logbuf[:row, k * K.N_USIG + j]
    for j, name in enumerate(K.NET_SIGNALS):
        data[(NET_UNIT, name)] = logbuf[:row, n_units * K.N_USIG + j]
    if scenario.signals is not None:
        wanted = set(scenario.signals)
        data = {k: a for k, a in data.items() if f"{k[0]}:{k[1]}" in wanted or k[1] in wanted}
    if scenario.noise_snr_db is not None:
        data = _add_noise(data, scenario.noise_snr_db, np.random.default_rng(seed))
    if diverged:
        log.info("simulation diverged at t = %.4f s", t_end)
    return SimTrace(time, tuple(cfg.ids), data, diverged, t_end, cfg.grid.omega_n,
                    {"dt": dt, "seed": seed, "final_state": x})


def _apply_event(plant: Plant, nominal, e: Event, t):
    k = plant.config.index(e.target)
    if e.kind == "ramp":
        v = plant.config.vscs[k]
        ramp = plant.ramps[k]
        p_now, q_now = _ramp_value(ramp, t)
        dur = float(e.payload.get("duration", DEFAULT_RAMP))
        p_to, q_to = DispatchCommand(e.payload["p_ref"], e.payload["q_ref"]).physical(v)
        plant.ramps[k] = [t, t + dur, p_now, p_to, q_now, q_to]
    elif e.kind == "modulate":
        plant.mod[:] = [k, float(e.payload["delta_a"]) * nominal[k, K.P_KPI],
                        float(e.payload["f"]), t]
    elif e.kind == "modulate_off":
        plant.mod[:] = [-1.0, 0.0, 0.0, 0.0]
    elif e.kind == "retune":
        s = float(e.payload["kpv_scale"])
        plant.params[k, K.P_KPV] = nominal[k, K.P_KPV] * s
        plant.params[k, K.P_KIV] = nominal[k, K.P_KIV] * s


def _ramp_value(ramp, t):
    if t <= ramp[0]:
        return ramp[2], ramp[4]
    if t >= ramp[1]:
        return ramp[3], ramp[5]
    a = (t - ramp[0]) / (ramp[1] - ramp[0])
    return ramp[2] + a * (ramp[3] - ramp[2]), ramp[4] + a * (ramp[5] - ramp[4])


def settled_state(config: MicrogridConfig, commands):
    """Per-unit terminal quantities of the settled simulator, unit frames.

    The equilibrium search starts from the nominal-command equilibrium, not
    from the steady-state mapping under test.
    """
    x_nom = equilibrium(config)
    x = equilibrium(config, commands, x0=x_nom)
    return x, Plant(config, commands).unit_terminals(x)


def per_unit_terminal(config: MicrogridConfig, values):
    """Scale rows of ``(ud, uq, id, iq)`` by each unit's voltage/current base."""
    out = np.array(values, dtype=float)
    for k, v in enumerate(config.vscs):
        b = per_unit_base(v, config.grid)
        out[k, :2] /= b.voltage
        out[k, 2:] /= b.current
    return out


# --- post-processing ---------------------------------------------------------

@dataclass(frozen=True)
class Thresholds:
    freq_limit: float = 1.0  # Hz
    min_periods: int = 3
    floor: float = 1e-3  # Hz, envelope below this never counts as growth
    min_window: float = 0.5  # s of post-event data required
    growth: float = 1.02  # per-period amplitude ratio counted as growth


@dataclass(frozen=True)
class StabilityVerdict:
    verdict: str
    max_deviation: float
    frequency: float = float("nan")
    detail: str = ""

    @property
    def unstable(self):
        return self.verdict != "stable"


def detect_instability(trace: SimTrace, thresholds: Thresholds = None, t_start=None):
    """Classify a trace as ``stable``, ``oscillatory-unstable`` or ``diverged``.

    Only samples after ``t_start`` (default: trace start) are examined.
    """
    th = thresholds or Thresholds()
    if trace.diverged:
        return StabilityVerdict("diverged", float("inf"), detail=f"state blow-up at {trace.t_end:.3f} s")
    mask = trace.window(t_start)
    t = trace.time[mask]
    if len(t) < 2 or t[-1] - t[0] < th.min_window:
        raise ValueError(f"trace shorter than the analysis window ({th.min_window} s)")
    fs = trace.fs
    worst = 0.0
    for uid in trace.units:
        dev = trace.freq_deviation(uid)[mask]
        if not np.all(np.isfinite(dev)):
            return StabilityVerdict("diverged", float("inf"), detail=f"{uid}: non-finite samples")
        m = float(np.max(np.abs(dev)))
        worst = max(worst, m)
        if m > th.freq_limit:
            f0 = _safe_peak(dev, fs)
            return StabilityVerdict("oscillatory-unstable", m, f0, f"{uid}: |df| {m:.3f} Hz")
    for uid in trace.units:
        dev = trace.freq_deviation(uid)[mask]
        grown, f0 = _envelope_grows(dev, fs, th)
        if grown:
            return StabilityVerdict("oscillatory-unstable", worst, f0, f"{uid}: growing envelope")
    return StabilityVerdict("stable", worst)


def _safe_peak(x, fs):
    try:
        return spectral_peak(x, fs, min_samples=64)
    except ValueError:
        return float("nan")


def _envelope_grows(x, fs, th: Thresholds):
    x = x - x.mean()
    if np.max(np.abs(x)) < th.floor:
        return False, float("nan")
    f0 = _safe_peak(x, fs)
    if not np.isfinite(f0) or f0 <= 0:
        return False, float("nan")
    n = int(round(fs / f0))
    if n < 2:
        return False, f0
    amps = [np.max(np.abs(x[i:i + n])) for i in range(0, len(x) - n + 1, n)]
    if len(amps) < th.min_periods + 1:
        return False, f0
    tail = np.array(amps[-(th.min_periods + 1):])
    grows = np.all(tail[1:] > th.growth * tail[:-1]) and tail[-1] > th.floor
    return bool(grows), f0


def spectral_peak(x, fs, min_samples=1024):
    """Largest non-DC spectral line of a detrended signal (Hann, interpolated)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < min_samples:
        raise ValueError(f"window too short: {n} samples, need {min_samples}")
    t = np.arange(n)
    x = x - np.polyval(np.polyfit(t, x, 1), t)
    mag = np.abs(np.fft.rfft(x * np.hanning(n)))
    scale = max(np.max(np.abs(x)), 1e-300)
    k = int(np.argmax(mag[1:])) + 1
    if mag[k] <= 1e-9 * n * scale or np.max(np.abs(x)) < 1e-12:
        raise ValueError("no non-DC component above noise floor")
    if 1 <= k < len(mag) - 1 and mag[k - 1] > 0 and mag[k + 1] > 0:
        a, b, c = np.log(mag[k - 1]), np.log(mag[k]), np.log(mag[k + 1])
        den = a - 2 * b + c
        delta = 0.5 * (a - c) / den if den != 0 else 0.0
    else:
        delta = 0.0
    return (k + delta) * fs / n


def dominant_frequency(trace: SimTrace, signal, window=None):
    """Dominant oscillation frequency (Hz) of ``signal`` (``"unit:name"``) over ``window``."""
    t0, t1 = window if window is not None else (None, None)
    mask = trace.window(t0, t1)
    x = trace.get(signal)[mask]
    return spectral_peak(x, trace.fs)

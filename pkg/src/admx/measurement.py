"""Two-stage harmonic-injection admittance identification.

A measurement unit modulates its current-loop gain sinusoidally, which acts
as a voltage source inside the unit and perturbs the PCC voltage.  Between
the two stages the measurement unit's voltage loop is retuned, so the PCC
voltage responses of the two stages are not collinear and the 2x2
regression ``[i1 i2] = Y [u1 u2]`` has a unique solution.

Samples are stored per-unit on each unit's own rating: operating points as
``(U_d, U_q, I_d, I_q)`` in the unit's steady frame and admittances scaled by
the unit's base impedance.  Currents are those drawn into the unit.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analytic import Admittance2x2, OperatingPoint, rotation
from .config import DispatchCommand, MicrogridConfig, config_to_dict, per_unit_base
from .sim import Event, NET_UNIT, Plant, SimScenario, equilibrium, run, system_jacobian
from .steady import SteadyStateError

log = logging.getLogger(__name__)

BAND = (2.0, 130.0)
STAGGER = 7
CSV_COLUMNS = ["unit", "provenance", "Ud", "Uq", "Id", "Iq", "f", "re_ydd", "im_ydd", "re_ydq",
               "im_ydq", "re_yqd", "im_yqd", "re_yqq", "im_yqq", "cond"]
PROVENANCES = ("measured", "analytic", "predicted")


class MeasurementError(RuntimeError):
    pass


class NoExcitation(MeasurementError):
    pass


class RankDeficient(MeasurementError):
    pass


class UnstableOperatingPoint(MeasurementError):
    pass


@dataclass(frozen=True)
class PerturbationPlan:
    f_p_list: tuple = tuple(np.geomspace(*BAND, 12))
    delta_a: float = 0.2
    kpv_scale: float = 2.5  # BW2 retune of the measurement unit's voltage loop
    settle_time: float = 0.5
    capture_periods: int = 10
    samples_per_period: int = 200
    dt_max: float = 20e-6
    gain_limit: float = 0.5

    def validate(self):
        f = np.asarray(self.f_p_list, dtype=float)
        if f.size == 0:
            raise ValueError("plan needs at least one frequency")
        if np.any(np.diff(f) <= 0):
            raise ValueError("perturbation frequencies must be strictly increasing")
        if f[0] < BAND[0] - 1e-9 or f[-1] > BAND[1] + 1e-9:
            raise ValueError(f"perturbation frequencies must lie in [{BAND[0]}, {BAND[1]}] Hz")
        if not 0 <= self.delta_a <= self.gain_limit:
            raise ValueError(f"delta_a must keep k_pi within +/-{self.gain_limit:.0%} of nominal")
        if not self.kpv_scale > 0 or self.capture_periods < 1 or self.settle_time < 0:
            raise ValueError("invalid stage or capture settings")

    def timing(self, f):
        """``(dt, decimation, settle_periods)`` giving an integer number of samples per period."""
        period = 1.0 / f
        dt_rec = period / self.samples_per_period
        decim = max(1, int(np.ceil(dt_rec / self.dt_max)))
        return dt_rec / decim, decim, int(np.ceil(self.settle_time * f))

    def to_dict(self):
        return {"f_p_list": [float(x) for x in self.f_p_list], "delta_a": self.delta_a,
                "kpv_scale": self.kpv_scale, "settle_time": self.settle_time,
                "capture_periods": self.capture_periods,
                "samples_per_period": self.samples_per_period, "dt_max": self.dt_max}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "f_p_list" in d:
            d["f_p_list"] = tuple(float(x) for x in d["f_p_list"])
        plan = cls(**d)
        plan.validate()
        return plan


@dataclass(frozen=True)
class AdmittanceSample:
    unit: str
    op: OperatingPoint  # per-unit
    f: float
    y: Admittance2x2  # per-unit
    provenance: str = "measured"
    cond: float = float("nan")

    def key(self):
        return (self.unit, tuple(np.round(self.op.as_array(), 12)), round(self.f, 9), self.provenance)


@dataclass
class AdmittanceDataset:
    samples: list = field(default_factory=list)
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [s.key() for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (unit, op, f, provenance) samples")

    def __len__(self):
        return len(self.samples)

    def units(self):
        return sorted({s.unit for s in self.samples})

    def subset(self, unit=None, provenance=None):
        out = [s for s in self.samples
               if (unit is None or s.unit == unit) and (provenance is None or s.provenance == provenance)]
        return AdmittanceDataset(out, self.fingerprint, dict(self.meta))

    def arrays(self):
        """``(ops (N,4), freqs (N,), Y (N,2,2))``."""
        ops = np.array([s.op.as_array() for s in self.samples]).reshape(-1, 4)
        f = np.array([s.f for s in self.samples])
        y = np.array([s.y.matrix for s in self.samples]).reshape(-1, 2, 2)
        return ops, f, y

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in self.samples:
                m = s.y.matrix
                w.writerow([s.unit, s.provenance, *[repr(float(v)) for v in s.op.as_array()],
                            repr(float(s.f)),
                            *[repr(float(g)) for z in m.ravel() for g in (z.real, z.imag)],
                            repr(float(s.cond))])

    @classmethod
    def from_csv(cls, path):
        out = []
        with open(path, newline="") as fh:
            r = csv.DictReader(fh)
            missing = set(CSV_COLUMNS) - set(r.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in r:
                op = OperatingPoint(*(float(row[k]) for k in ("Ud", "Uq", "Id", "Iq")))
                f = float(row["f"])
                vals = [complex(float(row[f"re_y{c}"]), float(row[f"im_y{c}"]))
                        for c in ("dd", "dq", "qd", "qq")]
                out.append(AdmittanceSample(row["unit"], op, f, Admittance2x2(*vals, f),
                                            row["provenance"], float(row["cond"])))
        return cls(out)


def config_fingerprint(config: MicrogridConfig, *extra):
    blob = json.dumps([config_to_dict(config), *extra], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def extract_phasor(x, fs, f_p, baseline=0.0):
    """Complex amplitude of the ``f_p`` component of a real signal.

    The window must hold an integer number of periods of ``f_p``.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if f_p >= fs / 2:
        raise ValueError(f"f_p = {f_p} Hz is above the Nyquist frequency {fs / 2} Hz")
    periods = n * f_p / fs
    if abs(periods - round(periods)) > 1e-6 * max(1.0, periods) or round(periods) < 1:
        raise ValueError(f"window spans {periods:.6f} periods of f_p, not an integer number")
    t = np.arange(n) / fs
    return 2.0 / n * np.sum((x - baseline) * np.exp(-2j * np.pi * f_p * t))


def solve_regression(u1, u2, i1, i2, max_cond=1e6, floor=1e-9):
    """``Y = [i1 i2] [u1 u2]^-1`` and ``cond([u1 u2])``."""
    umat = np.column_stack([np.asarray(u1, complex), np.asarray(u2, complex)])
    imat = np.column_stack([np.asarray(i1, complex), np.asarray(i2, complex)])
    if not (np.all(np.isfinite(umat)) and np.all(np.isfinite(imat))):
        raise ValueError("phasors must be finite")
    if np.max(np.abs(umat)) < floor:
        raise NoExcitation("no excitation: voltage phasors below the noise floor")
    c = float(np.linalg.cond(umat))
    if not c <= max_cond:
        raise RankDeficient(f"rank-deficient excitation (cond = {c:.3g})")
    return imat @ np.linalg.inv(umat), c


@dataclass
class StageResponse:
    f: float
    stage: int
    u_pcc: np.ndarray  # common-frame phasor pair, V
    i_units: dict  # unit -> common-frame injected-current phasor pair, A
    i_grid: np.ndarray


def _simulate_stage(config, commands, x0, plan: PerturbationPlan, f, stage, kpv_scale2,
                    noise_snr_db, seed, mu):
    dt, decim, settle_periods = plan.timing(f)
    period = 1.0 / f
    t_cap = (settle_periods + plan.capture_periods) * period
    events = []
    if stage == 2:
        events.append(Event(0.0, "retune", mu, {"kpv_scale": kpv_scale2}))
    if plan.delta_a > 0:
        events.append(Event(0.0, "modulate", mu, {"delta_a": plan.delta_a, "f": f}))
    cfg = config.__class__(config.vscs, config.grid, dict(zip(config.ids, commands)),
                           config.measurement_unit, config.extra)
    sc = SimScenario(cfg, t_cap, dt, tuple(events), record_dt=dt * decim,
                     noise_snr_db=noise_snr_db, initial_state=x0)
    tr = run(sc, seed=seed)
    if tr.diverged:
        raise UnstableOperatingPoint(f"simulation diverged during injection at {f:g} Hz")
    n_cap = plan.capture_periods * plan.samples_per_period
    fs = 1.0 / (dt * decim)
    sl = slice(len(tr.time) - n_cap, len(tr.time))

    def ph(unit, a, b, base):
        return np.array([extract_phasor(tr.get(unit, a)[sl], fs, f, base[0]),
                         extract_phasor(tr.get(unit, b)[sl], fs, f, base[1])])

    plant = Plant(cfg)
    _, aux = plant.rhs(x0)
    nu = int(plant.offsets[-1])
    u = ph(NET_UNIT, "upcc_d", "upcc_q", x0[nu:nu + 2])
    ig = ph(NET_UNIT, "ig_d", "ig_q", x0[nu + 2:nu + 4])
    iu = {}
    for k, v in enumerate(cfg.vscs):
        iu[v.id] = ph(v.id, "icd", "icq", aux[k, :2])
    return StageResponse(f, stage, u, iu, ig)


def settle_check(config: MicrogridConfig, commands):
    """Equilibrium of the commanded point; raises if absent or small-signal unstable."""
    try:
        a, x, _ = system_jacobian(config, commands)
    except SteadyStateError as exc:
        raise UnstableOperatingPoint(f"no steady state: {exc}") from None
    worst = float(np.max(np.linalg.eigvals(a).real))
    if worst >= 0:
        raise UnstableOperatingPoint(f"operating point unstable (max Re lambda = {worst:.3g} 1/s)")
    return x


def run_two_stage(config: MicrogridConfig, commands, plan: PerturbationPlan = None,
                  seed=0, noise_snr_db=None, kpv_scale2=None, jobs=1, x0=None):
    """Raw phasor responses for both stages at every plan frequency.

    ``kpv_scale2`` overrides the stage-2 voltage-loop scale; passing 1.0
    repeats the first stage unchanged.
    """
    plan = plan or PerturbationPlan()
    plan.validate()
    commands = list(commands)
    x0 = settle_check(config, commands) if x0 is None else x0
    k2 = plan.kpv_scale if kpv_scale2 is None else kpv_scale2
    mu = config.measurement_unit
    tasks = [(config, commands, x0, plan, float(f), s, k2, noise_snr_db, seed + 2 * i + s, mu)
             for i, f in enumerate(plan.f_p_list) for s in (1, 2)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            res = list(ex.map(_star_stage, tasks))
    else:
        res = [_simulate_stage(*t) for t in tasks]
    out = {}
    for r in res:
        out.setdefault(r.f, {})[r.stage] = r
    return out, x0


def _star_stage(args):
    return _simulate_stage(*args)


def unit_frame_responses(config: MicrogridConfig, x0, resp_f):
    """Convert a frequency's two stages to each unit's steady frame (drawn current)."""
    plant = Plant(config)
    u_stage, i_stage = [], {v.id: [] for v in config.vscs}
    for s in (1, 2):
        r = resp_f[s]
        u_stage.append(r.u_pcc)
        for v in config.vscs:
            i_stage[v.id].append(-r.i_units[v.id])
    out = {}
    for k, v in enumerate(config.vscs):
        rot = rotation(-x0[plant.offsets[k]])
        out[v.id] = ([rot @ u for u in u_stage], [rot @ i for i in i_stage[v.id]])
    return out


def identify(config: MicrogridConfig, responses, x0, units=None, max_cond=1e6):
    """Admittance of each unit (unit frame, SI) and the grid impedance per frequency."""
    units = units or [u for u in config.ids if u != config.measurement_unit]
    ys, zg, conds = {}, {}, {}
    for f, resp in sorted(responses.items()):
        conv = unit_frame_responses(config, x0, resp)
        for uid in units:
            (u1, u2), (i1, i2) = conv[uid]
            y, c = solve_regression(u1, u2, i1, i2, max_cond)
            ys[(uid, f)] = y
            conds[f] = c
        # grid branch: u_pcc = Zg i_g with i_g flowing from the PCC to the grid
        u1, u2 = resp[1].u_pcc, resp[2].u_pcc
        g1, g2 = resp[1].i_grid, resp[2].i_grid
        gm = np.column_stack([g1, g2])
        zg[f] = np.column_stack([u1, u2]) @ np.linalg.inv(gm)
    return ys, zg, conds


def terminal_op(config: MicrogridConfig, x0, commands=None):
    """Per-unit steady terminal operating points ``{unit: OperatingPoint}``."""
    plant = Plant(config, commands)
    term = plant.unit_terminals(x0)
    out = {}
    for k, v in enumerate(config.vscs):
        b = per_unit_base(v, config.grid)
        ud, uq, i_d, i_q = term[k]
        out[v.id] = OperatingPoint(ud / b.voltage, uq / b.voltage, i_d / b.current, i_q / b.current)
    return out


def default_command_grid():
    axis = np.round(np.arange(-0.8, 0.8 + 1e-9, 0.4), 10)
    return [DispatchCommand(float(p), float(q)) for p in axis for q in axis]


def staggered_commands(grid, units, j, stride=STAGGER):
    """Command of each under-test unit at sweep step ``j``.

    Unit k takes grid[(j + stride*k) mod n], so every unit visits every grid
    point while the combined dispatch (and hence the PCC voltage) varies.
    """
    n = len(grid)
    return {u: grid[(j + stride * k) % n] for k, u in enumerate(units)}


def sweep(config: MicrogridConfig, plan: PerturbationPlan = None, command_grid=None,
          units=None, seed=0, noise_snr_db=None, jobs=None, stagger=True):
    """Measured dataset over a command grid, visited by every under-test unit.

    With ``stagger`` the units walk the grid at different offsets; without it
    all under-test units share the same command at each step.
    """
    plan = plan or PerturbationPlan()
    plan.validate()
    grid = default_command_grid() if command_grid is None else list(command_grid)
    mu = config.measurement_unit
    units = units or [u for u in config.ids if u != mu]
    if mu in units:
        raise ValueError("the measurement unit cannot measure itself")
    jobs = jobs or int(os.environ.get("ADMX_JOBS", "1"))
    samples, skipped = [], []
    zg_est = {}
    for j, cmd in enumerate(grid):
        own = staggered_commands(grid, units, j) if stagger else {u: cmd for u in units}
        cmds = config.commands(own)
        try:
            resp, x0 = run_two_stage(config, cmds, plan, seed=seed + 1000 * j,
                                     noise_snr_db=noise_snr_db, jobs=jobs)
            ys, zg, conds = identify(config, resp, x0, units)
        except MeasurementError as exc:
            log.warning("sweep step %d skipped: %s", j, exc)
            skipped.append({"step": j, "commands": {u: [c.p_ref, c.q_ref] for u, c in own.items()},
                            "reason": str(exc)})
            continue
        ops = terminal_op(config, x0, cmds)
        for (uid, f), y in ys.items():
            zb = per_unit_base(config.unit(uid), config.grid).impedance
            samples.append(AdmittanceSample(uid, ops[uid], f, Admittance2x2.from_matrix(y * zb, f),
                                            "measured", conds[f]))
        for f, z in zg.items():
            zg_est.setdefault(f, []).append(z)
    meta = {"plan": plan.to_dict(), "seed": seed, "skipped": skipped,
            "grid_impedance": {repr(f): np.mean(v, axis=0).tolist() for f, v in zg_est.items()}}
    return AdmittanceDataset(samples, config_fingerprint(config, plan.to_dict(), seed), meta)

"""Worst-case dispatch search.

For every target unit the command grid is swept with all other units at
their nominal commands.  Each (command, uncertainty sample) pair is mapped
to a steady state, the admittances are fetched from a source (analytic
model or trained surrogates) and the SMI is evaluated.  The worst case of a
unit is the minimum over its whole table.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analytic import admittance_matrices, model_at
from .config import DispatchCommand, MicrogridConfig, per_unit_base
from .stability import smi, sso_band, trace_loci
from .steady import SteadyStateError, UncertainParams, nominal_params, sample_uncertainty, solve_system

log = logging.getLogger(__name__)

SOURCES = ("analytic", "surrogate")
LOW_CONFIDENCE = 0.5


class AnalyticSource:
    """Unit-frame admittances from the linearized unit models.

    Sampled droop and virtual impedance replace the unit's own values, so the
    admittance follows the same parameters as the steady-state mapping.
    """
    envelope = None

    def __init__(self, config: MicrogridConfig, params: UncertainParams = None):
        self.config = config
        self.grid = config.grid
        self.params = params

    def with_params(self, params):
        return AnalyticSource(self.config, params)

    def unit_params(self, uid):
        v = self.config.unit(uid)
        if self.params is None:
            return v
        d_q, r_eff, l_eff = self.params.unit(uid)
        return dataclasses.replace(v, d_q=float(d_q), r_v=float(r_eff - v.r_f2),
                                   l_v=float(l_eff - v.l_f2))

    def __call__(self, uid, op, freqs):
        return admittance_matrices(model_at(self.unit_params(uid), self.grid, op), freqs)


class SurrogateSource:
    """Unit-frame admittances from per-unit surrogate models, returned in siemens."""

    def __init__(self, config: MicrogridConfig, models: dict):
        missing = set(config.ids) - set(models)
        if missing:
            raise ValueError(f"no surrogate for units {sorted(missing)}")
        self.config = config
        self.grid = config.grid
        self.models = models
        self.envelope = (1.0, 150.0)

    def with_params(self, params):
        return self

    def __call__(self, uid, op, freqs):
        b = per_unit_base(self.config.unit(uid), self.grid)
        x = np.array([op.u_d / b.voltage, op.u_q / b.voltage, op.i_d / b.current, op.i_q / b.current])
        freqs = np.asarray(freqs, dtype=float)
        y = self.models[uid].predict(np.repeat(x[None], len(freqs), 0), freqs, warn=False)
        return y / b.impedance


@dataclass
class ScanSpec:
    targets: tuple
    p_range: tuple = (-1.0, 1.0)
    q_range: tuple = (-1.0, 1.0)
    step: float = 0.1
    n_samples: int = 21  # nominal plus LHS draws
    source: str = "analytic"
    band: tuple = (2.0, 130.0, 400)
    seed: int = 0
    bounds: dict = None

    def validate(self, config: MicrogridConfig = None):
        if not self.step > 0:
            raise ValueError("step must be positive")
        for lo, hi in (self.p_range, self.q_range):
            if not -1.0 - 1e-12 <= lo <= hi <= 1.0 + 1e-12:
                raise ValueError("command grid must lie inside [-1, 1] p.u.")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if not self.targets:
            raise ValueError("at least one target unit is required")
        if config is not None:
            unknown = set(self.targets) - set(config.ids)
            if unknown:
                raise ValueError(f"unknown target units {sorted(unknown)}")

    def axis(self, lo, hi):
        n = int(np.floor((hi - lo) / self.step + 1e-9))
        return np.round(lo + self.step * np.arange(n + 1), 10)

    def commands(self):
        return [DispatchCommand(float(p), float(q)) for p in self.axis(*self.p_range)
                for q in self.axis(*self.q_range)]

    def freqs(self):
        return sso_band(int(self.band[2]), self.band[0], self.band[1])

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d


def evaluate_point(config: MicrogridConfig, target, command: DispatchCommand, params: UncertainParams,
                   source, freqs=None):
    """SMI with ``target`` at ``command`` and every other unit at its nominal command."""
    cmds = config.commands({target: command})
    state = solve_system(config, cmds, params)
    res = smi(trace_loci(source.with_params(params), state, freqs))
    res.state = state
    return res


@dataclass
class UnitResult:
    unit: str
    m_wc: float
    command: tuple
    sample: int
    f_crit: float
    per_sample: list  # min over commands for each uncertainty sample
    n_points: int
    n_infeasible: int

    @property
    def low_confidence(self):
        return self.n_infeasible > LOW_CONFIDENCE * self.n_points


@dataclass
class StabilityReport:
    units: dict
    k_star: str
    table: list  # rows: target, p_ref, q_ref, sample, m, s, d, f_crit, feasible
    spec: dict
    samples: list
    baseline_m: float = float("nan")
    meta: dict = field(default_factory=dict)

    def check(self):
        for uid, r in self.units.items():
            ms = [row["m"] for row in self.table if row["target"] == uid and row["feasible"]]
            if ms and r.m_wc != min(ms):
                raise AssertionError(f"{uid}: worst case is not the table minimum")
        if self.units:
            best = min(self.units.values(), key=lambda r: r.m_wc)
            if best.unit != self.k_star:
                raise AssertionError("k* is not the argmin of the worst-case SMI")

    def to_dict(self):
        return {"k_star": self.k_star,
                "units": {u: dataclasses.asdict(r) | {"low_confidence": r.low_confidence}
                          for u, r in self.units.items()},
                "baseline_m": self.baseline_m,
                "spec": self.spec,
                "samples": [s.to_dict() for s in self.samples],
                "meta": self.meta,
                "table": self.table}

    def save(self, path, csv_path=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        if csv_path:
            self.table_csv(csv_path)

    def table_csv(self, path):
        cols = ["target", "p_ref", "q_ref", "sample", "m", "s", "d", "f_crit", "feasible"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            for row in self.table:
                w.writerow(row)

    @classmethod
    def from_dict(cls, d):
        units = {}
        for u, r in d["units"].items():
            r = {k: v for k, v in r.items() if k != "low_confidence"}
            r["command"] = tuple(r["command"])
            units[u] = UnitResult(**r)
        samples = [UncertainParams(tuple(s["ids"]), s["d_q"], s["r_v"], s["l_v"], s["provenance"])
                   for s in d["samples"]]
        return cls(units, d["k_star"], d["table"], d["spec"], samples, d.get("baseline_m", float("nan")),
                   d.get("meta", {}))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _tie_key(row):
    return (row["m"], abs(row["p_ref"]) + abs(row["q_ref"]), row["p_ref"], row["q_ref"], row["sample"])


def _eval_chunk(args):
    config, source, target, chunk, samples, freqs = args
    rows = []
    for cmd in chunk:
        for j, params in enumerate(samples):
            try:
                r = evaluate_point(config, target, cmd, params, source, freqs)
                rows.append({"target": target, "p_ref": cmd.p_ref, "q_ref": cmd.q_ref, "sample": j,
                             "m": r.m_k, "s": r.s_k, "d": r.d_k, "f_crit": r.f_crit, "feasible": True})
            except (SteadyStateError, np.linalg.LinAlgError, ValueError) as exc:
                log.info("%s (%.2f, %.2f) sample %d infeasible: %s", target, cmd.p_ref, cmd.q_ref, j, exc)
                rows.append({"target": target, "p_ref": cmd.p_ref, "q_ref": cmd.q_ref, "sample": j,
                             "m": float("nan"), "s": 0, "d": float("nan"), "f_crit": float("nan"),
                             "feasible": False})
    return rows


def worst_case_scan(config: MicrogridConfig, spec: ScanSpec, source=None, jobs=None) -> StabilityReport:
    spec.validate(config)
    if source is None:
        if spec.source != "analytic":
            raise ValueError("a surrogate scan needs a SurrogateSource")
        source = AnalyticSource(config)
    jobs = jobs or int(os.environ.get("ADMX_JOBS", "1"))
    freqs = spec.freqs()
    samples = sample_uncertainty(nominal_params(config), spec.bounds, spec.n_samples, spec.seed)
    cmds = spec.commands()
    tasks = []
    n_chunks = max(1, jobs * 4)
    for target in spec.targets:
        for c in range(n_chunks):
            chunk = cmds[c::n_chunks]
            if chunk:
                tasks.append((config, source, target, chunk, samples, freqs))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_eval_chunk, tasks))
    else:
        parts = [_eval_chunk(t) for t in tasks]
    # deterministic order regardless of chunking
    table = sorted((r for p in parts for r in p),
                   key=lambda r: (spec.targets.index(r["target"]), r["p_ref"], r["q_ref"], r["sample"]))

    units = {}
    for target in spec.targets:
        rows = [r for r in table if r["target"] == target]
        ok = [r for r in rows if r["feasible"]]
        n_bad = len(rows) - len(ok)
        if not ok:
            units[target] = UnitResult(target, float("nan"), (float("nan"),) * 2, -1, float("nan"),
                                       [float("nan")] * len(samples), len(rows), n_bad)
            continue
        best = min(ok, key=_tie_key)
        per_sample = []
        for j in range(len(samples)):
            ms = [r["m"] for r in ok if r["sample"] == j]
            per_sample.append(min(ms) if ms else float("nan"))
        units[target] = UnitResult(target, best["m"], (best["p_ref"], best["q_ref"]), best["sample"],
                                   best["f_crit"], per_sample, len(rows), n_bad)
        if units[target].low_confidence:
            log.warning("%s: %d of %d points infeasible; result is low-confidence", target, n_bad, len(rows))
    scored = [r for r in units.values() if np.isfinite(r.m_wc)]
    k_star = min(scored, key=lambda r: (r.m_wc, spec.targets.index(r.unit))).unit if scored else ""
    try:
        base = smi(trace_loci(source.with_params(samples[0]), solve_system(config, None, samples[0]),
                              freqs)).m_k
    except (SteadyStateError, ValueError):
        base = float("nan")
    rep = StabilityReport(units, k_star, table, spec.to_dict(), samples, base)
    rep.check()
    return rep


@dataclass
class VulnerabilityMap:
    p_axis: np.ndarray
    q_axis: np.ndarray
    label: np.ndarray  # (np, nq) argmin unit per cell, "" where nothing is feasible
    m: np.ndarray
    boundary: np.ndarray  # cells whose sign differs from a 4-neighbour

    def counts(self, negative_only=False):
        sel = self.m < 0 if negative_only else np.isfinite(self.m)
        labels, n = np.unique(self.label[sel], return_counts=True)
        return dict(zip(labels.tolist(), n.tolist()))


def vulnerability_map(report: StabilityReport, sample: int = 0) -> VulnerabilityMap:
    rows = [r for r in report.table if r["sample"] == sample]
    if not rows:
        raise ValueError(f"report has no rows for uncertainty sample {sample}")
    ps = np.unique([r["p_ref"] for r in rows])
    qs = np.unique([r["q_ref"] for r in rows])
    label = np.full((len(ps), len(qs)), "", dtype=object)
    m = np.full((len(ps), len(qs)), np.nan)
    order = {u: k for k, u in enumerate(report.units)}
    for r in sorted(rows, key=lambda r: order.get(r["target"], 0)):
        if not r["feasible"]:
            continue
        i, j = np.searchsorted(ps, r["p_ref"]), np.searchsorted(qs, r["q_ref"])
        if not r["m"] >= m[i, j]:  # strict: first unit in order wins ties
            m[i, j] = r["m"]
            label[i, j] = r["target"]
    sgn = np.sign(m)
    boundary = np.zeros(m.shape, dtype=bool)
    for axis in (0, 1):
        d = np.diff(sgn, axis=axis) != 0
        d &= np.isfinite(np.diff(m, axis=axis))
        if axis == 0:
            boundary[:-1] |= d
            boundary[1:] |= d
        else:
            boundary[:, :-1] |= d
            boundary[:, 1:] |= d
    return VulnerabilityMap(ps, qs, label, m, boundary)

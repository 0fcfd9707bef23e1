"""``admx <simulate|measure|fit|scan|validate>``.

Exit codes: 0 success, 1 error, 2 domain-flagged outcome (unstable or
diverged trace, verdicts disagreeing with the SMI sign).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config

log = logging.getLogger("admx")

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2


class CliError(RuntimeError):
    pass


def file_fingerprint(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _require(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    return p


def _jobs(args):
    return args.jobs or int(os.environ.get("ADMX_JOBS", "1"))


def write_manifest(out_dir, subcommand, args, inputs, outputs, t0, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"subcommand": subcommand, "version": __version__, "seed": getattr(args, "seed", None),
                "argv": {k: v for k, v in vars(args).items() if k != "func"},
                "inputs": {str(Path(p).resolve()): file_fingerprint(p) for p in inputs},
                "outputs": [str(Path(p).resolve()) for p in outputs],
                "wall_time": round(time.perf_counter() - t0, 3)}
    manifest.update(extra or {})
    path = out_dir / f"manifest_{subcommand}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return path


# -- simulate ------------------------------------------------------------------

def cmd_simulate(args):
    from .sim import detect_instability, load_scenario, run
    import dataclasses
    t0 = time.perf_counter()
    src = _require(args.scenario)
    sc = load_scenario(src)
    overrides = {}
    if args.dt is not None:
        overrides["dt"] = args.dt
    if args.duration is not None:
        overrides["duration"] = args.duration
    if overrides:
        sc = dataclasses.replace(sc, **overrides)
        if sc.record_dt < sc.dt:
            sc = dataclasses.replace(sc, record_dt=sc.dt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = run(sc, seed=args.seed)
    trace_path = out / "trace.csv"
    trace.to_csv(trace_path)
    t_start = sc.events[0].t if sc.events else None
    verdict = detect_instability(trace, t_start=t_start)
    vpath = out / "verdict.json"
    with open(vpath, "w") as fh:
        json.dump({"verdict": verdict.verdict, "max_deviation": verdict.max_deviation,
                   "frequency": verdict.frequency, "detail": verdict.detail,
                   "diverged": trace.diverged, "t_end": trace.t_end}, fh, indent=1)
    write_manifest(out, "simulate", args, [src], [trace_path, vpath], t0,
                   {"overrides": overrides})
    print(f"verdict: {verdict.verdict} (max |df| = {verdict.max_deviation:.3f} Hz)")
    return EXIT_FLAGGED if verdict.unstable else EXIT_OK


# -- measure -------------------------------------------------------------------

def cmd_measure(args):
    from .measurement import PerturbationPlan, sweep
    t0 = time.perf_counter()
    cfg_path = _require(args.config)
    config = load_config(cfg_path)
    inputs = [cfg_path]
    plan = PerturbationPlan()
    if args.plan:
        inputs.append(_require(args.plan))
        plan = PerturbationPlan.from_dict(json.loads(Path(args.plan).read_text()))
    if args.measurement_unit:
        import dataclasses
        config = dataclasses.replace(config, measurement_unit=args.measurement_unit)
        config.validate()
    units = args.units.split(",") if args.units else None
    ds = sweep(config, plan, units=units, seed=args.seed, noise_snr_db=args.noise_snr_db,
               jobs=_jobs(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out)
    side = out.with_suffix(".meta.json")
    with open(side, "w") as fh:
        json.dump(ds.meta | {"fingerprint": ds.fingerprint}, fh, indent=1, default=str)
    write_manifest(out.parent, "measure", args, inputs, [out, side], t0)
    print(f"{len(ds)} samples for {', '.join(ds.units())} -> {out}")
    return EXIT_OK


# -- fit -----------------------------------------------------------------------

def cmd_fit(args):
    from .measurement import AdmittanceDataset
    from .surrogate import SurrogateModel, analytic_dataset, pretrain, transfer_finetune
    t0 = time.perf_counter()
    inputs = []
    if args.mode == "finetune" and not args.model_in:
        raise CliError("pretrained model required (--model-in) for finetune")
    if args.dataset:
        inputs.append(_require(args.dataset))
        ds = AdmittanceDataset.from_csv(args.dataset)
        if args.unit:
            ds = ds.subset(unit=args.unit)
    elif args.analytic:
        if not args.config:
            raise CliError("--analytic needs --config")
        inputs.append(_require(args.config))
        config = load_config(args.config)
        ds = analytic_dataset(config.unit(args.analytic), config.grid, n=args.samples, seed=args.seed)
    else:
        raise CliError("give a dataset path or --analytic UNIT")
    if len(ds) == 0:
        raise CliError("dataset is empty")
    if args.mode == "pretrain":
        epochs = 400 if args.epochs is None else args.epochs
        model, report = pretrain(ds, epochs=epochs, seed=args.seed)
    else:
        inputs.append(_require(args.model_in))
        base = SurrogateModel.load(args.model_in)
        epochs = 3000 if args.epochs is None else args.epochs
        model, report = transfer_finetune(base, ds, epochs=epochs, seed=args.seed)
    out = Path(args.model_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    rpath = out.with_suffix(".report.json")
    with open(rpath, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, default=str)
    write_manifest(out.parent, "fit", args, inputs, [out, rpath], t0)
    print(f"train/val MSE: {report.final[0]:.4g} / {report.final[1]:.4g} -> {out}")
    return EXIT_OK


# -- scan ----------------------------------------------------------------------

def cmd_scan(args):
    from .attack import AnalyticSource, ScanSpec, SurrogateSource, vulnerability_map, worst_case_scan
    from .surrogate import SurrogateModel
    t0 = time.perf_counter()
    cfg_path = _require(args.config)
    config = load_config(cfg_path)
    inputs = [cfg_path]
    spec_d = {}
    if args.spec:
        inputs.append(_require(args.spec))
        spec_d = json.loads(Path(args.spec).read_text())
    targets = args.targets.split(",") if args.targets else spec_d.pop("targets", None)
    if targets is None:
        targets = [u for u in config.ids if u != config.measurement_unit]
    spec_d.pop("targets", None)
    if args.step is not None:
        spec_d["step"] = args.step
    if args.samples is not None:
        spec_d["n_samples"] = args.samples
    spec_d["seed"] = args.seed
    for k in ("p_range", "q_range", "band"):
        if k in spec_d:
            spec_d[k] = tuple(spec_d[k])
    if args.analytic:
        spec_d["source"] = "analytic"
        source = AnalyticSource(config)
    elif args.models:
        spec_d["source"] = "surrogate"
        models = {}
        for uid in config.ids:
            p = Path(args.models) / f"{uid}.json"
            inputs.append(_require(p))
            models[uid] = SurrogateModel.load(p)
        source = SurrogateSource(config, models)
    else:
        raise CliError("choose --analytic or --models DIR")
    spec = ScanSpec(tuple(targets), **spec_d)
    report = worst_case_scan(config, spec, source, jobs=_jobs(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = out.with_suffix(".table.csv")
    report.save(out, table)
    vmap = vulnerability_map(report)
    vpath = out.with_suffix(".vmap.csv")
    with open(vpath, "w") as fh:
        fh.write("p_ref,q_ref,unit,m,boundary\n")
        for i, p in enumerate(vmap.p_axis):
            for j, q in enumerate(vmap.q_axis):
                fh.write(f"{p!r},{q!r},{vmap.label[i, j]},{vmap.m[i, j]!r},{int(vmap.boundary[i, j])}\n")
    write_manifest(out.parent, "scan", args, inputs, [out, table, vpath], t0)
    for uid, r in report.units.items():
        flag = " (low confidence)" if r.low_confidence else ""
        print(f"{uid}: M_wc = {r.m_wc:+.4f} at (P, Q) = {r.command}{flag}")
    print(f"most vulnerable unit: {report.k_star}")
    return EXIT_OK


# -- validate ------------------------------------------------------------------

def validation_table(report, config, ramp_at=2.0, duration=6.0, dt=20e-6, seed=0):
    """Simulate every target's worst-case command and compare with the SMI sign."""
    from .sim import Event, SimScenario, detect_instability, run
    rows = []
    for uid, r in report.units.items():
        if not np.isfinite(r.m_wc):
            continue
        p, q = r.command
        ev = Event(ramp_at, "ramp", uid, {"p_ref": p, "q_ref": q})
        tr = run(SimScenario(config, duration, dt, (ev,)), seed=seed)
        v = detect_instability(tr, t_start=ramp_at)
        predicted = r.m_wc < 0
        rows.append({"unit": uid, "p_ref": p, "q_ref": q, "m_wc": r.m_wc,
                     "smi_unstable": predicted, "verdict": v.verdict,
                     "max_deviation": v.max_deviation, "frequency": v.frequency,
                     "agree": predicted == v.unstable})
    return rows


def cmd_validate(args):
    from .attack import StabilityReport
    t0 = time.perf_counter()
    rpath, cpath = _require(args.report), _require(args.config)
    report = StabilityReport.load(rpath)
    config = load_config(cpath)
    rows = validation_table(report, config, duration=args.duration, dt=args.dt or 20e-6, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tpath = out / "validation.csv"
    cols = ["unit", "p_ref", "q_ref", "m_wc", "smi_unstable", "verdict", "max_deviation", "frequency", "agree"]
    with open(tpath, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    write_manifest(out, "validate", args, [rpath, cpath], [tpath], t0)
    for r in rows:
        print(f"{r['unit']}: SMI {'unstable' if r['smi_unstable'] else 'stable'}, "
              f"simulation {r['verdict']} ({'agree' if r['agree'] else 'DISAGREE'})")
    return EXIT_OK if all(r["agree"] for r in rows) else EXIT_FLAGGED


def build_parser():
    ap = argparse.ArgumentParser(prog="admx", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=None, help="worker cap (default $ADMX_JOBS or 1)")

    p = sub.add_parser("simulate", help="run a time-domain scenario")
    p.add_argument("scenario")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--dt", type=float)
    p.add_argument("--duration", type=float)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("measure", help="two-stage admittance measurement sweep")
    p.add_argument("config")
    p.add_argument("--plan")
    p.add_argument("--out", default="out/dataset.csv")
    p.add_argument("--units", help="comma-separated under-test units")
    p.add_argument("--measurement-unit")
    p.add_argument("--noise-snr-db", type=float)
    common(p)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("fit", help="pretrain or fine-tune a surrogate")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--mode", choices=("pretrain", "finetune"), default="pretrain")
    p.add_argument("--analytic", metavar="UNIT", help="generate the analytic dataset of UNIT")
    p.add_argument("--config")
    p.add_argument("--unit", help="restrict the dataset to one unit")
    p.add_argument("--samples", type=int, default=2500)
    p.add_argument("--model-in")
    p.add_argument("--model-out", default="out/model.json")
    p.add_argument("--epochs", type=int, help="default 400 (pretrain) or 3000 (finetune)")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="worst-case dispatch scan")
    p.add_argument("config")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--analytic", action="store_true")
    g.add_argument("--models", metavar="DIR", help="directory of <unit>.json surrogates")
    p.add_argument("--spec")
    p.add_argument("--targets")
    p.add_argument("--step", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--out", default="out/report.json")
    common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("validate", help="simulate the worst-case commands of a report")
    p.add_argument("report")
    p.add_argument("config")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--dt", type=float)
    common(p)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"admx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

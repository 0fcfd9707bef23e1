"""Acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line (also appended to
``acceptance_results.txt`` at the repository root) before asserting, so the
outcome is visible even when a criterion fails.  Expensive artifacts (the
measured dataset, the pretrained and fine-tuned surrogates, the scan report)
are built once per module.
"""
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from admx import attack as A
from admx import measurement as M
from admx import sim
from admx import surrogate as S
from admx.analytic import OperatingPoint, admittance_matrices, model_at
from admx.config import DispatchCommand, five_vsc, per_unit_base
from admx.stability import smi, trace_loci
from admx.steady import estimate_virtual_impedance, nominal_params, solve_system, solve_vsc_op

pytestmark = pytest.mark.acceptance

UNDER_TEST = ("VSC-A", "VSC-B", "VSC-C", "VSC-D")
RESULTS = Path(__file__).resolve().parents[1] / "acceptance_results.txt"
# published worst-case SMI values, logged for comparison only
REFERENCE_M = {"baseline": 0.902, "VSC-A": 0.191, "VSC-B": 0.127, "VSC-C": 0.499, "VSC-D": -0.875}
REFERENCE_SSO_HZ = 5.42


def verdict(capsys, n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    with capsys.disabled():
        print("\n" + line)
    with open(RESULTS, "a") as fh:
        fh.write(line + "\n")
    assert ok, line


def note(capsys, text):
    with capsys.disabled():
        print("\n  " + text)
    with open(RESULTS, "a") as fh:
        fh.write("  " + text + "\n")


@pytest.fixture(scope="module", autouse=True)
def _fresh_results():
    RESULTS.write_text(f"acceptance run {time.strftime('%Y-%m-%d %H:%M:%S')}\n")
    yield


@pytest.fixture(scope="module")
def config():
    return five_vsc()


def si_op(cfg, uid, op_pu):
    b = per_unit_base(cfg.unit(uid), cfg.grid)
    return OperatingPoint(op_pu.u_d * b.voltage, op_pu.u_q * b.voltage,
                          op_pu.i_d * b.current, op_pu.i_q * b.current)


# --- expensive shared artifacts ------------------------------------------------

@pytest.fixture(scope="module")
def measured(config):
    t0 = time.perf_counter()
    ds = M.sweep(config)
    return ds, time.perf_counter() - t0


@pytest.fixture(scope="module")
def pretrained(config):
    ds = S.analytic_dataset(config.unit(config.measurement_unit), config.grid, n=2500, seed=0)
    t0 = time.perf_counter()
    model, report = S.pretrain(ds, epochs=400, seed=0)
    return model, report, time.perf_counter() - t0, ds


@pytest.fixture(scope="module")
def finetuned(measured, pretrained):
    ds, _ = measured
    base = pretrained[0]
    return {uid: S.transfer_finetune(base, ds.subset(unit=uid))[0] for uid in UNDER_TEST}


@pytest.fixture(scope="module")
def heldout(config):
    """Operating points of 20 random dispatches inside the measured command box, f in [5, 130] Hz."""
    rng = np.random.default_rng(7)
    cmds = [[DispatchCommand(*rng.uniform(-0.8, 0.8, 2)) for _ in config.ids] for _ in range(20)]
    states = [solve_system(config, c) for c in cmds]
    freqs = np.geomspace(5.0, 130.0, 40)
    return states, freqs


def cell_errors(config, model, uid, states, freqs):
    v = config.unit(uid)
    ops = np.array([st.op(uid).per_unit(v, config.grid) for st in states])
    ref = S.analytic_samples(v, config.grid, ops, freqs)
    y = np.array([s.y.matrix for s in ref.samples])
    p = model.predict(np.repeat(ops, len(freqs), 0), np.tile(freqs, len(ops)), warn=False)
    db = np.abs(20 * np.log10(np.abs(p) / np.abs(y)))
    deg = np.degrees(np.abs(np.angle(p / y)))
    return db.ravel(), deg.ravel()


@pytest.fixture(scope="module")
def scan_report(config):
    t0 = time.perf_counter()
    rep = A.worst_case_scan(config, A.ScanSpec(targets=UNDER_TEST))
    return rep, time.perf_counter() - t0


# --- criteria -------------------------------------------------------------------

def test_criterion_1_measurement_fidelity(config, capsys):
    t0 = time.perf_counter()
    rated = [DispatchCommand(1.0, 0.0)] * len(config.ids)
    plan = M.PerturbationPlan(f_p_list=tuple(np.geomspace(5.0, 130.0, 12)))
    errs = {}
    # VSC-E is the injecting unit in the stock set-up, so VSC-C injects to measure it
    for mu, units in (("VSC-E", list(UNDER_TEST)), ("VSC-C", ["VSC-E"])):
        cfg = dataclasses.replace(config, measurement_unit=mu)
        resp, x0 = M.run_two_stage(cfg, rated, plan)
        ys, _, _ = M.identify(cfg, resp, x0, units)
        ops = M.terminal_op(cfg, x0, rated)
        for uid in units:
            ya = admittance_matrices(model_at(cfg.unit(uid), cfg.grid, si_op(cfg, uid, ops[uid])),
                                     plan.f_p_list)
            ym = np.array([ys[(uid, f)] for f in plan.f_p_list])
            mag = np.abs(np.abs(ym) / np.abs(ya) - 1)
            ph = np.degrees(np.abs(np.angle(ym / ya)))
            errs[uid] = (float(mag.mean()), float(ph.mean()))
    elapsed = time.perf_counter() - t0
    ok = all(m <= 0.01 and p <= 3.0 for m, p in errs.values()) and elapsed <= 600
    detail = ", ".join(f"{u} {100 * m:.3f}%/{p:.3f}deg" for u, (m, p) in errs.items())
    verdict(capsys, 1, ok, f"mean |Y| and phase error over 5-130 Hz: {detail}; {elapsed:.0f} s")


def test_criterion_2_rank_condition(config, capsys):
    plan = M.PerturbationPlan()
    cmds = config.commands()
    single, x0 = M.run_two_stage(config, cmds, plan, kpv_scale2=1.0)
    conds_1 = []
    for f in plan.f_p_list:
        (u1, u2), _ = M.unit_frame_responses(config, x0, single[f])["VSC-A"]
        conds_1.append(np.linalg.cond(np.column_stack([u1, u2])))
    double, x0 = M.run_two_stage(config, cmds, plan)
    _, _, conds = M.identify(config, double, x0)
    conds_2 = np.array([conds[f] for f in plan.f_p_list])
    frac = float(np.mean(conds_2 < 100))
    ok = min(conds_1) > 1e6 and frac >= 0.9
    verdict(capsys, 2, ok, f"single-stage min cond {min(conds_1):.3g}; two-stage cond < 100 at "
                           f"{100 * frac:.0f}% of {len(conds_2)} frequencies (max {conds_2.max():.1f})")


def test_criterion_3_surrogate_pretrain(pretrained, capsys):
    model, report, elapsed, ds = pretrained
    grad = S.gradient_check(model, ds, n=5)
    ok = report.final[1] <= 0.1 and grad < 1e-4 and elapsed <= 1800
    verdict(capsys, 3, ok, f"train/val MSE {report.final[0]:.4g}/{report.final[1]:.4g} (bar 0.1), "
                           f"gradient check {grad:.2e}, {elapsed:.0f} s")


def test_criterion_4_surrogate_extrapolation(config, finetuned, pretrained, heldout, measured, capsys):
    states, freqs = heldout
    _, sweep_time = measured
    fracs, before = {}, {}
    for uid in UNDER_TEST:
        db, deg = cell_errors(config, finetuned[uid], uid, states, freqs)
        fracs[uid] = float(np.mean((db < 3) & (deg < 4)))
        db0, deg0 = cell_errors(config, pretrained[0], uid, states, freqs)
        before[uid] = float(np.mean((db0 < 3) & (deg0 < 4)))
    ok = all(v >= 0.9 for v in fracs.values())
    detail = ", ".join(f"{u} {100 * fracs[u]:.1f}% (pretrained {100 * before[u]:.1f}%)" for u in UNDER_TEST)
    note(capsys, f"measurement sweep took {sweep_time:.0f} s")
    verdict(capsys, 4, ok, f"cells within 3 dB / 4 deg: {detail}")


def test_criterion_5_vulnerability_identification(scan_report, capsys):
    rep, elapsed = scan_report
    u = rep.units
    sign_ok = u["VSC-D"].m_wc < 0 and all(u[k].m_wc > 0 for k in ("VSC-A", "VSC-B", "VSC-C"))
    corner_ok = (u["VSC-D"].command == (-1.0, -1.0)
                 and all(u[k].command == (-1.0, 1.0) for k in ("VSC-A", "VSC-B", "VSC-C")))
    note(capsys, f"baseline SMI {rep.baseline_m:.3f} (reference {REFERENCE_M['baseline']})")
    for k in UNDER_TEST:
        note(capsys, f"{k}: M_wc {u[k].m_wc:+.3f} at {u[k].command}, f_crit {u[k].f_crit:.1f} Hz "
                     f"(reference {REFERENCE_M[k]:+.3f})")
    ok = rep.k_star == "VSC-D" and sign_ok and corner_ok
    verdict(capsys, 5, ok, f"k* = {rep.k_star}; signs {'ok' if sign_ok else 'wrong'}; "
                           f"corners {'ok' if corner_ok else 'wrong'}; scan {elapsed:.0f} s")


def test_criterion_6_end_to_end_validation(config, scan_report, capsys):
    from admx.cli import validation_table
    rep, _ = scan_report
    rows = validation_table(rep, config, ramp_at=2.0, duration=6.0)
    unstable = sorted(r["unit"] for r in rows if r["verdict"] != "stable")
    for r in rows:
        note(capsys, f"{r['unit']} -> ({r['p_ref']}, {r['q_ref']}): {r['verdict']}, "
                     f"max |df| {r['max_deviation']:.3f} Hz")
    p, q = rep.units["VSC-D"].command
    tr = sim.run(sim.SimScenario(config, 6.0, events=(
        sim.Event(2.0, "ramp", "VSC-D", {"p_ref": p, "q_ref": q}),)))
    ramp_end = 2.0 + sim.DEFAULT_RAMP
    win = tr.window(ramp_end, ramp_end + 2.0)
    dev = max(np.max(np.abs(tr.freq_deviation(k)[win])) for k in tr.units)
    try:
        f_dom = sim.dominant_frequency(tr, "VSC-D:omega", (ramp_end, tr.time[-1]))
    except ValueError:
        f_dom = float("nan")
    ok = unstable == ["VSC-D"] and 2.0 <= f_dom <= 30.0 and dev > 1.0
    verdict(capsys, 6, ok, f"unstable verdicts: {unstable or 'none'}; dominant frequency {f_dom:.2f} Hz "
                           f"(reference {REFERENCE_SSO_HZ}); max |df| within 2 s of ramp end {dev:.3f} Hz")


def test_criterion_7_smi_simulation_agreement(config, capsys):
    rng = np.random.default_rng(0)
    src = A.AnalyticSource(config)
    p0 = nominal_params(config)
    agree, counted, skipped = 0, 0, 0
    n_unstable_smi = n_unstable_sim = 0
    for _ in range(25):
        cmd = DispatchCommand(*np.round(rng.uniform(-1, 1, 2), 3))
        m = A.evaluate_point(config, "VSC-D", cmd, p0, src).m_k
        tr = sim.run(sim.SimScenario(config, 4.0, events=(
            sim.Event(1.0, "ramp", "VSC-D", {"p_ref": cmd.p_ref, "q_ref": cmd.q_ref}),)))
        v = sim.detect_instability(tr, t_start=1.0)
        n_unstable_smi += m < 0
        n_unstable_sim += v.unstable
        if abs(m) <= 0.02:
            skipped += 1
            continue
        counted += 1
        agree += (m < 0) == v.unstable
    frac = agree / counted if counted else 0.0
    ok = counted > 0 and frac >= 0.9
    verdict(capsys, 7, ok, f"sign agreement {agree}/{counted} ({100 * frac:.0f}%), {skipped} marginal; "
                           f"unstable by SMI {n_unstable_smi}, by simulation {n_unstable_sim}")


def test_criterion_8_steady_state_oracle(config, capsys):
    rng = np.random.default_rng(11)
    worst, n_ok, n = 0.0, 0, 0
    while n < 20:
        cmds = [DispatchCommand(*rng.uniform(-1, 1, 2)) for _ in config.ids]
        try:
            state = solve_system(config, cmds)
            _, term = sim.settled_state(config, cmds)
        except Exception:
            continue  # infeasible draw
        n += 1
        ours = sim.per_unit_terminal(config, [o.as_array() for o in state.ops])
        ref = sim.per_unit_terminal(config, term)
        err = float(np.max(np.abs(ours - ref)))
        worst = max(worst, err)
        n_ok += err <= 0.005
    grid = config.grid
    rec = 0.0
    for r_v, l_v in ((0.05, 2e-3), (0.0, 1.5e-3), (0.12, 4e-3), (0.02, 8e-4)):
        nop = solve_vsc_op(60e3, 15e3, 315.0, r_v, l_v, grid, s_base=100e3)
        r_hat, l_hat = estimate_virtual_impedance(nop, grid.omega_n)
        rec = max(rec, abs(l_hat - l_v) / l_v, abs(r_hat - r_v) / max(r_v, 1e-300) if r_v else abs(r_hat))
    ok = n_ok == n and rec < 1e-10
    verdict(capsys, 8, ok, f"{n_ok}/{n} command vectors within 0.5% p.u. per component "
                           f"(worst {100 * worst:.2f}%); virtual-impedance recovery {rec:.1e}")


# --- supporting properties reported alongside the criteria ------------------------

def test_finetune_beats_pretrained(config, finetuned, pretrained, heldout, capsys):
    states, freqs = heldout
    wins = {}
    for uid in UNDER_TEST:
        db1, deg1 = cell_errors(config, finetuned[uid], uid, states, freqs)
        db0, deg0 = cell_errors(config, pretrained[0], uid, states, freqs)
        wins[uid] = float(np.mean(db1 + deg1 / 4 * 3 < db0 + deg0 / 4 * 3))
    note(capsys, "fine-tuned beats pretrained on: " + ", ".join(f"{u} {100 * w:.0f}%" for u, w in wins.items()))
    assert len({finetuned[u].theta.tobytes() for u in UNDER_TEST}) == 4
    assert all(w >= 0.8 for w in wins.values())


def test_surrogate_matches_analytic_smi(config, finetuned, pretrained, capsys):
    models = dict(finetuned)
    models[config.measurement_unit] = pretrained[0]
    sur = A.SurrogateSource(config, models)
    ana = A.AnalyticSource(config)
    p0 = nominal_params(config)
    rng = np.random.default_rng(5)
    diffs = []
    for _ in range(10):
        uid = UNDER_TEST[rng.integers(4)]
        cmd = DispatchCommand(*np.round(rng.uniform(-1, 1, 2), 2))
        diffs.append(abs(A.evaluate_point(config, uid, cmd, p0, sur).m_k
                         - A.evaluate_point(config, uid, cmd, p0, ana).m_k))
    note(capsys, f"surrogate vs analytic SMI: max |dM| {max(diffs):.3f} over 10 points")
    assert max(diffs) < 0.15

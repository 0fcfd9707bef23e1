import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admx import measurement as M
from admx.analytic import OperatingPoint, admittance_matrices, grid_impedance, model_at
from admx.config import DispatchCommand, per_unit_base
from admx.measurement import AdmittanceDataset, AdmittanceSample, PerturbationPlan
from admx.analytic import Admittance2x2

UNDER_TEST = ["VSC-A", "VSC-B", "VSC-C", "VSC-D"]


def _angle_between(a, b):
    c = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return np.degrees(np.arccos(min(1.0, c)))


def _analytic_unit(cfg, uid, op_pu, freqs):
    v = cfg.unit(uid)
    b = per_unit_base(v, cfg.grid)
    si = OperatingPoint(op_pu.u_d * b.voltage, op_pu.u_q * b.voltage,
                        op_pu.i_d * b.current, op_pu.i_q * b.current)
    return admittance_matrices(model_at(v, cfg.grid, si), freqs)


@pytest.fixture(scope="module")
def two_stage(cfg):
    plan = PerturbationPlan(f_p_list=(5.0, 20.0, 50.0, 100.0))
    resp, x0 = M.run_two_stage(cfg, cfg.commands(), plan)
    return plan, resp, x0


# --- phasors -----------------------------------------------------------------

def test_known_tone_phasor():
    fs, f = 2000.0, 10.0
    t = np.arange(2000) / fs
    p = M.extract_phasor(3 * np.cos(2 * np.pi * f * t) + 1, fs, f, baseline=1.0)
    assert abs(p) == pytest.approx(3.0, rel=1e-9)
    assert abs(np.degrees(np.angle(p))) < 0.5


def test_zero_signal_phasor():
    assert M.extract_phasor(np.zeros(400), 1000.0, 10.0) == 0


@given(amp=st.floats(0.1, 10), phase=st.floats(-3.1, 3.1), periods=st.integers(1, 20))
@settings(max_examples=40, deadline=None)
def test_phasor_recovers_tone(amp, phase, periods):
    f, spp = 7.0, 64
    fs = f * spp
    t = np.arange(periods * spp) / fs
    p = M.extract_phasor(amp * np.cos(2 * np.pi * f * t + phase), fs, f)
    assert p == pytest.approx(amp * np.exp(1j * phase), abs=1e-9 * amp)


def test_phasor_rejects_partial_period():
    with pytest.raises(ValueError, match="integer"):
        M.extract_phasor(np.ones(150), 1000.0, 10.0)


def test_phasor_rejects_above_nyquist():
    with pytest.raises(ValueError, match="Nyquist"):
        M.extract_phasor(np.ones(100), 100.0, 60.0)


# --- regression --------------------------------------------------------------

def test_identity_excitation_returns_y():
    y = np.array([[1 + 2j, -0.5j], [0.3, 2 - 1j]])
    got, c = M.solve_regression([1, 0], [0, 1], y[:, 0], y[:, 1])
    np.testing.assert_array_equal(got, y)
    assert c == pytest.approx(1.0)


def test_collinear_excitation():
    u1 = np.array([1 + 1j, 0.5])
    with pytest.raises(M.RankDeficient, match="rank-deficient excitation"):
        M.solve_regression(u1, 2 * u1, [1, 0], [0, 1])


def test_zero_excitation():
    with pytest.raises(M.NoExcitation, match="no excitation"):
        M.solve_regression([0, 0], [0, 0], [0, 0], [0, 0])


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
                min_size=8, max_size=8))
@settings(max_examples=60)
def test_regression_reproduces_y(vals):
    y = np.array(vals[:4]).reshape(2, 2)
    u = np.array(vals[4:]).reshape(2, 2)
    if np.linalg.cond(u) > 1e4 or np.abs(u).max() < 1e-3:
        return
    got, _ = M.solve_regression(u[:, 0], u[:, 1], y @ u[:, 0], y @ u[:, 1])
    np.testing.assert_allclose(got, y, atol=1e-8 * max(1.0, np.abs(y).max()))


# --- plan --------------------------------------------------------------------

def test_plan_rejects_out_of_band():
    with pytest.raises(ValueError, match="130"):
        PerturbationPlan(f_p_list=(20.0, 400.0)).validate()


@pytest.mark.parametrize("kw", [dict(f_p_list=(20.0, 10.0)), dict(delta_a=0.6),
                                dict(f_p_list=()), dict(kpv_scale=0)])
def test_plan_invariants(kw):
    with pytest.raises(ValueError):
        PerturbationPlan(**kw).validate()


def test_plan_timing_integer_samples():
    plan = PerturbationPlan()
    for f in plan.f_p_list:
        dt, decim, settle = plan.timing(f)
        assert dt <= plan.dt_max * (1 + 1e-12)
        assert (1 / f) / (dt * decim) == pytest.approx(plan.samples_per_period)
        assert settle / f >= plan.settle_time - 1e-12


def test_plan_dict_round_trip():
    plan = PerturbationPlan(f_p_list=(3.0, 9.0), delta_a=0.1)
    assert PerturbationPlan.from_dict(plan.to_dict()) == plan


def test_default_grid_has_25_commands():
    g = M.default_command_grid()
    assert len(g) == 25 and len(set(g)) == 25
    units = UNDER_TEST
    for u_k in range(len(units)):
        seen = {M.staggered_commands(g, units, j)[units[u_k]] for j in range(25)}
        assert len(seen) == 25


# --- simulated two-stage runs ----------------------------------------------

def test_stages_not_collinear_at_20hz(two_stage):
    _, resp, _ = two_stage
    assert _angle_between(resp[20.0][1].u_pcc, resp[20.0][2].u_pcc) > 5.0


def test_two_stage_conditioning(two_stage, cfg):
    _, resp, x0 = two_stage
    _, _, conds = M.identify(cfg, resp, x0)
    assert all(c < 100 for c in conds.values())


def test_two_stage_fidelity(two_stage, cfg):
    plan, resp, x0 = two_stage
    ys, _, _ = M.identify(cfg, resp, x0)
    ops = M.terminal_op(cfg, x0, cfg.commands())
    freqs = list(plan.f_p_list)
    for uid in UNDER_TEST:
        ya = _analytic_unit(cfg, uid, ops[uid], freqs)
        for j, f in enumerate(freqs):
            ym, yr = ys[(uid, f)], ya[j]
            big = np.abs(yr) > 0.05 * np.abs(yr).max()  # phase is meaningless on tiny entries
            assert np.max(np.abs(ym - yr)) / np.abs(yr).max() < 0.01
            assert np.max(np.abs(np.degrees(np.angle(ym[big] / yr[big])))) < 3.0


def test_grid_impedance_estimate_50hz(two_stage, cfg):
    _, resp, x0 = two_stage
    _, zg, _ = M.identify(cfg, resp, x0)
    ref = grid_impedance(cfg.grid, 50.0)
    ref = ref.matrix if hasattr(ref, "matrix") else np.asarray(ref)
    assert np.max(np.abs(zg[50.0] - ref)) / np.abs(ref).max() < 0.02


def test_single_stage_is_rank_deficient(cfg):
    plan = PerturbationPlan(f_p_list=(5.0, 30.0, 120.0))
    resp, x0 = M.run_two_stage(cfg, cfg.commands(), plan, kpv_scale2=1.0)
    for f in plan.f_p_list:
        conv = M.unit_frame_responses(cfg, x0, resp[f])
        (u1, u2), _ = conv["VSC-A"]
        assert np.linalg.cond(np.column_stack([u1, u2])) > 1e6
    with pytest.raises(M.RankDeficient):
        M.identify(cfg, resp, x0)


def test_zero_modulation_no_excitation(cfg):
    plan = PerturbationPlan(f_p_list=(20.0,), delta_a=0.0)
    resp, x0 = M.run_two_stage(cfg, cfg.commands(), plan)
    with pytest.raises(M.NoExcitation):
        M.identify(cfg, resp, x0)


def test_linear_regime(cfg):
    ys = []
    for da in (0.1, 0.2):
        plan = PerturbationPlan(f_p_list=(30.0,), delta_a=da)
        resp, x0 = M.run_two_stage(cfg, cfg.commands(), plan)
        ys.append(M.identify(cfg, resp, x0)[0][("VSC-B", 30.0)])
    assert np.max(np.abs(ys[0] - ys[1])) / np.abs(ys[1]).max() < 0.01


def test_unstable_point_rejected(cfg, monkeypatch):
    def boom(*a, **k):
        raise M.UnstableOperatingPoint("operating point unstable")
    monkeypatch.setattr(M, "settle_check", boom)
    ds = M.sweep(cfg, PerturbationPlan(f_p_list=(20.0,)), [DispatchCommand(0.5, 0.0)])
    assert len(ds) == 0
    assert len(ds.meta["skipped"]) == 1


# --- sweep and datasets ------------------------------------------------------

def test_empty_grid_gives_empty_dataset(cfg):
    ds = M.sweep(cfg, command_grid=[])
    assert len(ds) == 0


def test_small_sweep_shape_and_determinism(cfg, tmp_path):
    plan = PerturbationPlan(f_p_list=(10.0, 40.0))
    grid = [DispatchCommand(0.4, 0.0), DispatchCommand(0.8, -0.4)]
    a = M.sweep(cfg, plan, grid, noise_snr_db=60, seed=5)
    assert len(a) == len(UNDER_TEST) * 2 * 2
    assert a.units() == UNDER_TEST
    assert all(s.provenance == "measured" and np.isfinite(s.cond) for s in a.samples)
    b = M.sweep(cfg, plan, grid, noise_snr_db=60, seed=5)
    for sa, sb in zip(a.samples, b.samples):
        assert sa == sb
    assert a.fingerprint == b.fingerprint
    path = tmp_path / "ds.csv"
    a.to_csv(path)
    back = AdmittanceDataset.from_csv(path)
    assert back.samples == a.samples


def test_dataset_rejects_duplicates():
    s = AdmittanceSample("VSC-A", OperatingPoint(1, 0, 0.5, 0), 10.0, Admittance2x2(1, 0, 0, 1, 10.0))
    with pytest.raises(ValueError, match="duplicate"):
        AdmittanceDataset([s, s])


def test_csv_header(tmp_path):
    s = AdmittanceSample("VSC-A", OperatingPoint(1, 0, 0.5, 0), 10.0, Admittance2x2(1, 2j, 0, 1, 10.0))
    path = tmp_path / "one.csv"
    AdmittanceDataset([s]).to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(M.CSV_COLUMNS)
    assert M.CSV_COLUMNS == ["unit", "provenance", "Ud", "Uq", "Id", "Iq", "f", "re_ydd", "im_ydd",
                             "re_ydq", "im_ydq", "re_yqd", "im_yqd", "re_yqq", "im_yqq", "cond"]


def test_csv_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("unit,f\nVSC-A,1\n")
    with pytest.raises(ValueError, match="missing columns"):
        AdmittanceDataset.from_csv(path)

import numpy as np
import pytest
from scipy.optimize import curve_fit

from admx import sim
from admx.config import ConfigError
from admx.sim import Event, SimScenario, SimTrace, Thresholds


def synthetic(omega, fs=1000.0, unit="U1", omega_n=2 * np.pi * 50):
    t = np.arange(len(omega)) / fs
    return SimTrace(t, (unit,), {(unit, "omega"): np.asarray(omega, float)}, omega_n=omega_n)


@pytest.fixture(scope="module")
def nominal_trace(cfg):
    return sim.run(SimScenario(cfg, 2.0))


def test_constant_trace_stable():
    tr = synthetic(np.full(3000, 2 * np.pi * 50))
    v = sim.detect_instability(tr)
    assert v.verdict == "stable"
    assert not v.unstable


def test_growing_5hz_unstable():
    t = np.arange(3000) / 1000.0
    dev = 0.01 * np.exp(1.0 * t) * np.sin(2 * np.pi * 5 * t)  # stays below 1 Hz
    assert np.max(np.abs(dev)) < 1.0
    v = sim.detect_instability(synthetic(2 * np.pi * (50 + dev)))
    assert v.verdict == "oscillatory-unstable"
    assert v.frequency == pytest.approx(5.0, abs=0.3)


def test_decaying_5hz_stable():
    t = np.arange(3000) / 1000.0
    dev = 0.2 * np.exp(-1.0 * t) * np.sin(2 * np.pi * 5 * t)
    assert sim.detect_instability(synthetic(2 * np.pi * (50 + dev))).verdict == "stable"


def test_large_deviation_unstable():
    t = np.arange(1000) / 1000.0
    dev = 1.5 * np.sin(2 * np.pi * 7 * t)
    v = sim.detect_instability(synthetic(2 * np.pi * (50 + dev)))
    assert v.verdict == "oscillatory-unstable"
    assert v.max_deviation > 1.0


def test_diverged_flag_wins():
    tr = synthetic(np.full(1000, 2 * np.pi * 50))
    tr.diverged = True
    tr.t_end = 0.5
    assert sim.detect_instability(tr).verdict == "diverged"


def test_short_trace_rejected():
    with pytest.raises(ValueError, match="shorter"):
        sim.detect_instability(synthetic(np.full(100, 2 * np.pi * 50)), Thresholds(min_window=0.5))


def test_known_tone():
    t = np.arange(4096) / 1000.0
    assert sim.spectral_peak(np.sin(2 * np.pi * 10 * t + 0.3), 1000.0) == pytest.approx(10.0, abs=0.05)


def test_dominant_frequency_on_trace():
    t = np.arange(4096) / 1000.0
    tr = synthetic(2 * np.pi * (50 + 0.1 * np.sin(2 * np.pi * 10 * t)))
    assert sim.dominant_frequency(tr, "U1:omega") == pytest.approx(10.0, abs=0.05)


def test_dc_only_signal():
    with pytest.raises(ValueError, match="no non-DC component above noise floor"):
        sim.spectral_peak(np.full(2048, 3.0), 1000.0)


def test_window_too_short():
    with pytest.raises(ValueError, match="too short"):
        sim.spectral_peak(np.sin(np.arange(500)), 1000.0)


def test_nominal_baseline_quiet(nominal_trace):
    assert not nominal_trace.diverged
    for u in nominal_trace.units:
        assert np.max(np.abs(nominal_trace.freq_deviation(u))) < 0.01
    assert sim.detect_instability(nominal_trace).verdict == "stable"


def test_trace_arrays_uniform(nominal_trace):
    n = len(nominal_trace.time)
    assert np.allclose(np.diff(nominal_trace.time), 1e-3)
    assert all(len(a) == n for a in nominal_trace.data.values())


def test_power_balance(nominal_trace):
    tr = nominal_trace
    p_units = sum(tr.get(u, "p")[-1] for u in tr.units)
    p_grid = 1.5 * (tr.get("net", "upcc_d") * tr.get("net", "ig_d")
                    + tr.get("net", "upcc_q") * tr.get("net", "ig_q"))[-1]
    assert p_units == pytest.approx(p_grid, rel=1e-3)


def test_deterministic(cfg):
    sc = SimScenario(cfg, 0.6, events=(Event(0.1, "ramp", "VSC-B", {"p_ref": 0.8, "q_ref": 0.2}),),
                     noise_snr_db=60)
    a, b = sim.run(sc, seed=3), sim.run(sc, seed=3)
    for k in a.data:
        assert np.array_equal(a.data[k], b.data[k])
    c = sim.run(sc, seed=4)
    assert not np.array_equal(a.get("VSC-B", "p"), c.get("VSC-B", "p"))


def test_dt_halving_converges(cfg):
    ev = (Event(0.1, "ramp", "VSC-A", {"p_ref": 0.9, "q_ref": -0.3, "duration": 0.2}),)
    a = sim.run(SimScenario(cfg, 1.0, dt=20e-6, events=ev))
    b = sim.run(SimScenario(cfg, 1.0, dt=10e-6, events=ev))
    s = cfg.vscs[0].s_rated
    for sig in ("p", "q"):
        rms = np.sqrt(np.mean((a.get("VSC-A", sig) - b.get("VSC-A", sig)) ** 2)) / s
        assert rms < 1e-4
    rms = np.sqrt(np.mean((a.get("VSC-A", "delta") - b.get("VSC-A", "delta")) ** 2))
    assert rms < 1e-4


def test_small_signal_mode_matches_eigenvalue(cfg):
    a, x_eq, labels = sim.system_jacobian(cfg)
    lam, vec = np.linalg.eig(a)
    osc = np.where((lam.imag > 1) & (lam.real > -20))[0]
    k = osc[np.argmax(lam.real[osc])]
    v = vec[:, k]
    deltas = [i for i, lb in enumerate(labels) if lb.endswith(":delta")]
    j = deltas[int(np.argmax(np.abs(v[deltas])))]
    uid = labels[j].split(":")[0]
    x0 = x_eq + 1e-3 * np.real(v / v[j])  # 1 mrad on the strongest angle
    tr = sim.run(SimScenario(cfg, 2.0, initial_state=x0))
    t = tr.time
    y = tr.get(uid, "delta") - x_eq[j]

    def model(t, amp, sig, w, ph, c):
        return amp * np.exp(sig * t) * np.cos(w * t + ph) + c

    p, _ = curve_fit(model, t, y, p0=[1e-3, lam[k].real, lam[k].imag, 0.0, 0.0])
    assert abs(p[2] - lam[k].imag) < 0.05 * abs(lam[k].imag)
    assert abs(p[1] - lam[k].real) < 0.05 * abs(lam[k])


def test_csv_round_trip(tmp_path, cfg):
    tr = sim.run(SimScenario(cfg, 0.05))
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    assert path.read_text().splitlines()[0] == "time,unit,signal,value"
    back = SimTrace.from_csv(path)
    assert back.units == tr.units
    np.testing.assert_allclose(back.time, tr.time, atol=1e-9)
    for k in tr.data:
        np.testing.assert_array_equal(back.data[k], tr.data[k])


@pytest.mark.parametrize("bad", [
    dict(dt=0.0),
    dict(duration=-1.0),
    dict(events=(Event(0.5, "ramp", "VSC-A", {"p_ref": 0, "q_ref": 0}),
                 Event(0.1, "ramp", "VSC-B", {"p_ref": 0, "q_ref": 0}))),
    dict(events=(Event(0.1, "ramp", "VSC-Z", {"p_ref": 0, "q_ref": 0}),)),
    dict(events=(Event(0.1, "ramp", "VSC-A", {"p_ref": 0, "q_ref": 0, "duration": -1}),)),
    dict(events=(Event(0.1, "explode", "VSC-A"),)),
])
def test_invalid_scenarios(cfg, bad):
    kw = dict(duration=1.0)
    kw.update(bad)
    with pytest.raises(ConfigError):
        sim.run(SimScenario(cfg, **kw))


def test_bundled_case5_loads():
    from admx.config import bundled_path
    sc = sim.load_scenario(bundled_path("case5.json"))
    assert [e.target for e in sc.events] == ["VSC-D", "VSC-D"]
    assert sc.events[0].payload["p_ref"] == -1 and sc.events[0].payload["q_ref"] == -1


def test_settled_state_is_equilibrium(cfg):
    x, term = sim.settled_state(cfg, cfg.commands())
    dx, _ = sim.Plant(cfg).rhs(x)
    assert np.max(np.abs(dx / sim.Plant(cfg).scale)) < 1e-6
    assert term.shape == (5, 4)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from insolegrf import gait
from insolegrf.dataio import CHANNELS
from insolegrf.model_core import pwl_eval
from insolegrf.sim import (
    GaitProfile,
    SensorLaw,
    SimConfig,
    first_order_lag,
    linearized_law,
    make_truth_hw,
    play_operator,
    synth_dataset,
    synth_grf,
    synth_sensor,
    synth_trial,
)

QUIET = SensorLaw(lag_tau_s=0.0, hysteresis_width=0.0, noise_sigma=0.0)
SIMPLE = GaitProfile(cycle_s=1.0, duty=0.6, period_jitter=0.0, amp_jitter=0.0)


def test_swing_is_exactly_zero():
    grf, truth = synth_grf(SIMPLE, 30.0, 100.0)
    fv = grf.vertical.values
    t = np.arange(len(fv)) / 100.0
    times = truth["heel_strike_times"]
    for hs in times[:-1]:
        in_cycle = (t >= hs - 1e-9) & (t < hs + 1.0 - 1e-9)
        tau = t[in_cycle] - hs
        inside = (tau > 1e-9) & (tau < 0.6 - 1e-9)
        assert np.all(fv[in_cycle][inside] > 0)
        assert np.all(fv[in_cycle][~inside] == 0)
        # 40 of the 100 samples lie in swing, plus the touch-down sample itself
        assert np.sum(fv[in_cycle] == 0) in (40, 41)


def test_zero_jitter_cycles_identical():
    grf, truth = synth_grf(SIMPLE, 30.0, 100.0)
    seg = gait.segment_cycles(grf.vertical.values, truth["heel_strike_indices"])
    assert np.all(seg.cycles == seg.cycles[0])
    assert np.all(gait.cycle_stats(seg).std == 0.0)


# amplitude jitter scales a stride's impulse directly, so it is switched off;
# period jitter stays on
@pytest.mark.parametrize("profile", [
    GaitProfile(amp_jitter=0.0), SIMPLE, GaitProfile(duty=0.7, body_weight_n=600.0, fv_peak_n=700.0, amp_jitter=0.0),
])
def test_impulse_matches_body_weight(profile):
    rate = 1000.0
    grf_l, truth = synth_grf(profile, 20.0, rate, seed=1, side="left")
    grf_r, _ = synth_grf(profile, 20.0, rate, seed=1, side="right")
    total = grf_l.vertical.values + grf_r.vertical.values
    idx = truth["heel_strike_indices"]
    for a, b, T in list(zip(idx[2:-3], idx[3:-2], truth["periods"][2:-3]))[:8]:
        impulse = np.sum(total[a:b]) / rate
        assert impulse == pytest.approx(profile.body_weight_n * T, rel=0.02)
        # one foot carries half of it
        assert 2 * np.sum(grf_l.vertical.values[a:b]) / rate == pytest.approx(profile.body_weight_n * T, rel=0.02)


def test_unloaded_sensor_sits_at_r0():
    law = SensorLaw(noise_sigma=0.0)
    ins = synth_sensor(np.zeros((4, 300)), law)
    for c in CHANNELS:
        np.testing.assert_allclose(ins.channels[c].values, law.r0[c], rtol=1e-12)


@given(st.floats(0.0, 5000.0))
def test_static_closed_form(force):
    ins = synth_sensor(np.full((4, 50), force), QUIET)
    for c in CHANNELS:
        r = ins.channels[c].values
        dr = 100.0 * (r - QUIET.r0[c]) / QUIET.r0[c]
        expect = -100.0 * QUIET.a[c] * force / (force + QUIET.f_half[c])
        np.testing.assert_allclose(dr, expect, rtol=1e-9, atol=1e-9)
        assert dr[0] > -100.0 * QUIET.a[c]
        if force > 1e-6:
            assert dr[0] < 0


@given(st.floats(0.0, 3000.0), st.floats(0.0, 3000.0))
def test_resistance_monotone_in_force(f1, f2):
    lo, hi = sorted((f1, f2))
    for c in CHANNELS:
        assert QUIET.static(c, hi) <= QUIET.static(c, lo)


def test_monotone_trial_without_hysteresis():
    law = SensorLaw(lag_tau_s=0.0, hysteresis_width=0.0, noise_sigma=0.0)
    _, truth = synth_trial(law=law, speeds=(1.0,), segment_s=10.0, seed=2)
    ins = synth_sensor(truth["channel_forces"], law)
    for i, c in enumerate(CHANNELS):
        f = truth["channel_forces"][i]
        r = ins.channels[c].values
        order = np.argsort(f, kind="stable")
        assert np.all(np.diff(r[order]) <= 1e-9)


def test_lag_step_time_constant():
    rate, tau = 100.0, 0.05
    x = np.concatenate([np.zeros(100), np.ones(100)])
    y = first_order_lag(x, tau, rate)
    crossed = int(np.argmax(y >= 1.0 - np.exp(-1.0) - 1e-12)) - 100
    assert abs(crossed - 5) <= 1
    law = SensorLaw(lag_tau_s=tau, hysteresis_width=0.0, noise_sigma=0.0)
    forces = np.zeros((4, 200))
    forces[:, 100:] = 300.0
    r = synth_sensor(forces, law, rate).channels["HL"].values
    r0, r1 = r[0], law.static("HL", 300.0)
    frac = (r0 - r) / (r0 - r1)
    crossed = int(np.argmax(frac >= 1.0 - np.exp(-1.0) - 1e-12)) - 100
    assert abs(crossed - 5) <= 1


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=80), st.floats(0.0, 20.0))
def test_play_operator_band(x, width):
    x = np.asarray(x)
    y = play_operator(x, width)
    assert np.all(np.abs(y - x) <= width / 2 + 1e-12)


def test_linearized_law_is_nearly_linear():
    law = linearized_law(SensorLaw(), 50.0)
    f = np.linspace(0.0, 800.0, 50)
    for c in CHANNELS:
        dr = 100 * (law.static(c, f) - law.r0[c]) / law.r0[c]
        slope = -100 * law.a[c] / law.f_half[c]
        # a F / (F + f_half) departs from a F / f_half by the factor F / (F + f_half)
        bound = f[-1] / (f[-1] + law.f_half[c])
        assert np.max(np.abs(dr - slope * f)) <= bound * np.max(np.abs(slope * f)) + 1e-12
        assert bound < 0.2


def test_seed_determinism():
    a, ta = synth_trial(speeds=(1.0, 2.0), segment_s=8.0, seed=9)
    b, tb = synth_trial(speeds=(1.0, 2.0), segment_s=8.0, seed=9)
    c, _ = synth_trial(speeds=(1.0, 2.0), segment_s=8.0, seed=10)
    assert np.array_equal(np.asarray(a.dr), np.asarray(b.dr))
    assert np.array_equal(a.grf.vertical.values, b.grf.vertical.values)
    assert np.array_equal(ta["heel_strike_indices"], tb["heel_strike_indices"])
    assert not np.array_equal(np.asarray(a.dr), np.asarray(c.dr))


def test_dataset_roles_and_sides():
    data = synth_dataset(speeds=(1.0,), trial_count=3, seed=4, segment_s=5.0)
    roles = [(t.side, t.role) for t, _ in data]
    assert roles.count(("left", "identification")) == 1
    assert roles.count(("right", "identification")) == 1
    assert roles.count(("left", "validation")) == 2
    assert [t.role for t, _ in data if t.side == "left"][0] == "identification"


def test_sim_config_builds_dataset():
    cfg = SimConfig(speeds=(1.0,), trial_count=2, segment_s=5.0, sides=("left",))
    data = cfg.dataset()
    assert len(data) == 2
    assert cfg.profile().fv_peak_n == pytest.approx(1.1 * cfg.body_weight_n)
    assert cfg.law().noise_sigma == 0.5
    with pytest.raises(ValueError):
        SimConfig(sides=("up",))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_phase_order_recovered(seed):
    trial, _ = synth_trial(speeds=(1.0,), segment_s=20.0, seed=seed)
    events = gait.detect_heel_strikes(trial.grf.vertical)
    stats = {c: gait.cycle_stats(gait.segment_cycles(trial.dr[i], events)) for i, c in enumerate(CHANNELS)}
    tl = gait.classify_phases(stats, gait.cycle_stats(gait.segment_cycles(trial.grf.vertical.values, events)))
    assert gait.onset_order(tl) == list(CHANNELS)
    assert gait.release_order(tl) == list(CHANNELS)


@pytest.mark.parametrize("k", [5, 6, 8])
def test_truth_model_stable_and_monotone(k):
    m = make_truth_hw(k, seed=k)
    assert m.g.is_stable()
    for c in CHANNELS:
        assert m.f1[c].k == k
        d = np.diff(m.f1[c].y)
        assert np.all(d > 0) or np.all(d < 0)
    assert np.all(np.diff(m.f2.y) > 0)


def test_truth_model_normalized_on_data():
    trial, _ = synth_trial(speeds=(1.0,), segment_s=10.0, seed=3)
    dr = np.asarray(trial.dr)
    m = make_truth_hw(6, seed=1, dr=dr)
    for i, c in enumerate(CHANNELS):
        assert np.std(pwl_eval(m.f1[c], dr[i])) == pytest.approx(1.0, rel=1e-9)

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from insolegrf import ident
from insolegrf.dataio import CHANNELS, ChannelSeries
from insolegrf.errors import DegenerateChannel, RankDeficientRegressor
from insolegrf.ident import IdentConfig
from insolegrf.metrics import nrmse_fit
from insolegrf.model_core import (
    HwModel,
    LinearModel,
    LtiBlock,
    PwlFunction,
    hw_simulate,
    serialize_model,
    simulate,
)
from insolegrf.sim import make_truth_hw

FAST = IdentConfig(breakpoint_grid=(6,), multistarts=2, max_iters=80, seed=3)


def with_target(trial, y, component="vertical"):
    series = ChannelSeries(np.asarray(y, dtype=float), trial.rate_hz, "newtons", trial.grf.vertical.t0)
    return replace(trial, grf=replace(trial.grf, **{component: series}))


def linear_truth():
    a = np.real(np.poly([0.8, 0.5]))
    b = np.array([[-1.5, 0.6, 0.2], [-0.8, 0.3, 0.1], [-1.2, 0.2, 0.4], [-0.6, 0.4, 0.1]])
    return LinearModel(LtiBlock(b, a, (0,) * 4), 40.0)


def fit_on(model, trial, truth_y):
    yhat = np.asarray(simulate(model, trial.dr))
    w = model.warmup
    return nrmse_fit(truth_y[w:], yhat[w:])


@pytest.fixture(scope="module")
def linear_data(short_trials):
    ident_t, valid_t = short_trials
    truth = linear_truth()
    y_i = np.asarray(simulate(truth, ident_t.dr))
    y_v = np.asarray(simulate(truth, valid_t.dr))
    return with_target(ident_t, y_i), with_target(valid_t, y_v), y_v


@pytest.fixture(scope="module")
def hw6_data(short_trials):
    ident_t, valid_t = short_trials
    truth = make_truth_hw(6, seed=21, dr=np.asarray(ident_t.dr))
    y_i = hw_simulate(truth, ident_t.dr)
    y_v = hw_simulate(truth, valid_t.dr)
    return with_target(ident_t, y_i), with_target(valid_t, y_v), y_v


# -- linear ------------------------------------------------------------------


def test_linear_truth_recovered(linear_data):
    ident_t, valid_t, y_v = linear_data
    res = ident.identify_linear(ident_t, FAST, valid=[valid_t])
    assert res.fit_ident.nrmse_fit_pct >= 99.0
    assert fit_on(res.model, valid_t, y_v) >= 99.0


def test_linear_truth_with_noise(linear_data):
    ident_t, valid_t, y_v = linear_data
    y = np.asarray(ident_t.grf.vertical.values)
    noisy = y + 0.01 * np.std(y) * np.random.default_rng(8).normal(size=len(y))
    res = ident.identify_linear(with_target(ident_t, noisy), FAST)
    assert fit_on(res.model, valid_t, y_v) >= 95.0


def test_constant_output_zero_variance_input(short_trials):
    ident_t, _ = short_trials
    n = len(ident_t)
    flat = np.full((len(CHANNELS), n), -5.0)
    with pytest.raises(RankDeficientRegressor):
        ident._arx_init(flat, np.full(n, 300.0), (3, 2, 0), 3)


def test_hw_zero_variance_channel(short_trials):
    ident_t, _ = short_trials
    u = np.asarray(ident_t.dr).copy()
    u[2] = 0.0
    lin = linear_truth()
    with pytest.raises(DegenerateChannel):
        ident._hw_setup(u, np.arange(u.shape[1], dtype=float), 6, (3, 2, 0), lin, FAST)


def test_short_trial_rejected(short_trials):
    ident_t, _ = short_trials
    y = ident_t.grf.vertical.values[:500]
    short = replace(
        ident_t,
        insole=replace(ident_t.insole, channels={c: replace(s, values=s.values[:500]) for c, s in ident_t.insole.channels.items()}),
        grf=replace(ident_t.grf, vertical=replace(ident_t.grf.vertical, values=y),
                    mediolateral=replace(ident_t.grf.mediolateral, values=ident_t.grf.mediolateral.values[:500])),
    )
    with pytest.raises(ValueError):
        ident.identify_linear(short, FAST)


# -- Hammerstein-Wiener ------------------------------------------------------------


def test_hw_truth_recovered(hw6_data):
    ident_t, valid_t, y_v = hw6_data
    cfg = IdentConfig(breakpoint_grid=(6,), multistarts=3, max_iters=150, seed=1)
    res = ident.identify_hw(ident_t, 6, cfg, valid=[valid_t])
    assert fit_on(res.model, valid_t, y_v) >= 95.0
    assert res.chosen_k == 6


def test_identity_truth_nests_linear(short_trials):
    ident_t, valid_t = short_trials
    lin = linear_truth()
    ident_f = {c: PwlFunction([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]) for c in CHANNELS}
    truth = HwModel(ident_f, lin.g, PwlFunction([0.0, 1.0], [40.0, 41.0]))
    y_i, y_v = hw_simulate(truth, ident_t.dr), hw_simulate(truth, valid_t.dr)
    it, vt = with_target(ident_t, y_i), with_target(valid_t, y_v)
    hw = ident.identify_hw(it, 6, FAST, valid=[vt])
    li = ident.identify_linear(it, FAST, valid=[vt])
    assert hw.fit_valid[0].nrmse_fit_pct >= li.fit_valid[0].nrmse_fit_pct - 1.0


def test_zero_iterations_returns_linear_start(hw6_data):
    ident_t, valid_t, _ = hw6_data
    cfg = IdentConfig(breakpoint_grid=(6,), multistarts=1, max_iters=0)
    lin = ident.identify_linear(ident_t, cfg, valid=[valid_t])
    hw = ident.identify_hw(ident_t, 6, cfg, linear=lin.model, valid=[valid_t])
    y_lin = np.asarray(simulate(lin.model, valid_t.dr))
    y_hw = np.asarray(simulate(hw.model, valid_t.dr))
    assert np.max(np.abs(y_lin - y_hw)) < 1e-8 * max(1.0, np.max(np.abs(y_lin)))
    assert hw.fit_valid[0].nrmse_fit_pct == pytest.approx(lin.fit_valid[0].nrmse_fit_pct, abs=1e-8)
    assert hw.trace == [pytest.approx(lin.cost, rel=1e-9)]


def test_hw_cost_never_above_linear(hw6_data, linear_data):
    for ident_t, _, _ in (hw6_data, linear_data):
        lin = ident.identify_linear(ident_t, FAST)
        hw = ident.identify_hw(ident_t, 6, FAST, linear=lin.model)
        assert hw.cost <= lin.cost * (1 + 1e-6)


def test_trace_monotone_and_stable(hw6_data):
    ident_t, _, _ = hw6_data
    res = ident.identify_hw(ident_t, 6, FAST)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert np.all(np.abs(res.model.g.poles()) < 1.0)
    lin = ident.identify_linear(ident_t, FAST)
    assert all(b <= a for a, b in zip(lin.trace, lin.trace[1:]))
    assert np.all(np.abs(lin.model.g.poles()) < 1.0)


def test_identification_is_deterministic(hw6_data):
    ident_t, valid_t, _ = hw6_data
    r1 = ident.identify_hw(ident_t, 6, FAST, valid=[valid_t])
    r2 = ident.identify_hw(ident_t, 6, FAST, valid=[valid_t])
    assert serialize_model(r1.model) == serialize_model(r2.model)
    assert r1.trace == r2.trace
    assert r1.fit_valid[0] == r2.fit_valid[0]


def test_k_must_be_in_grid(hw6_data):
    ident_t, _, _ = hw6_data
    with pytest.raises(ValueError):
        ident.identify_hw(ident_t, 7, FAST)


# -- grid search -------------------------------------------------------------


def test_grid_search_needs_validation(hw6_data):
    ident_t, _, _ = hw6_data
    with pytest.raises(ValueError):
        ident.grid_search(ident_t, [], FAST)


@pytest.fixture(scope="module")
def k7_search(short_trials):
    ident_t, valid_t = short_trials
    truth = make_truth_hw(7, seed=33, dr=np.asarray(ident_t.dr))
    it = with_target(ident_t, hw_simulate(truth, ident_t.dr))
    vt = with_target(valid_t, hw_simulate(truth, valid_t.dr))
    cfg = IdentConfig(breakpoint_grid=(5, 6, 7, 8, 9), multistarts=2, max_iters=100, seed=2)
    return ident.grid_search(it, [vt], cfg, return_all=True)


def test_grid_search_plateau_around_true_k(k7_search):
    best, everything = k7_search
    k7 = next(r for r in everything if r.chosen_k == 7)
    assert abs(best.valid_fit_mean - k7.valid_fit_mean) <= 2.0
    assert len(best.candidates) == 6


@pytest.mark.xfail(reason="truth breakpoints are not at data quantiles, so on noiseless data more "
                          "breakpoints keep helping slightly and the strict best-fit rule picks k = 9",
                   strict=False)
def test_grid_search_selects_near_true_k(k7_search):
    best, _ = k7_search
    assert best.chosen_k in (6, 7, 8)


def test_grid_search_linear_truth(linear_data):
    ident_t, valid_t, _ = linear_data
    cfg = IdentConfig(breakpoint_grid=(5, 6), multistarts=1, max_iters=60)
    best, everything = ident.grid_search(ident_t, [valid_t], cfg, return_all=True)
    lin = next(r for r in everything if r.chosen_k is None)
    assert best.chosen_k is None or best.valid_fit_mean - lin.valid_fit_mean <= 1.0 + 1e-9
    assert best.valid_fit_mean >= lin.valid_fit_mean


def test_selection_prefers_fewer_params_on_ties():
    class R:
        def __init__(self, fit, n, k):
            self.valid_fit_mean, self.chosen_k = fit, k
            self.model = type("M", (), {"n_params": n})()

    cands = [R(90.0, 50, 7), R(90.0 + 1e-12, 40, 6), R(89.0, 10, None)]
    assert min(cands, key=ident.selection_key).chosen_k == 6


# -- numerics ----------------------------------------------------------------


@given(st.lists(st.complex_numbers(max_magnitude=3.0, allow_nan=False, allow_infinity=False), min_size=1, max_size=4))
def test_stabilize_bounds_roots(roots):
    roots = [r for r in roots if abs(r) > 1e-3]
    if not roots:
        return
    conj = roots + [np.conj(r) for r in roots if abs(r.imag) > 1e-9]
    a = np.real(np.poly(conj))
    s = ident.stabilize(a)
    assert s[0] == pytest.approx(1.0)
    assert np.all(np.abs(np.roots(s)) <= ident.STABILITY_RADIUS + 1e-6)
    if np.all(np.abs(np.roots(a)) <= ident.STABILITY_RADIUS):
        assert np.array_equal(s, a)


@given(st.integers(2, 12), st.integers(0, 1000), st.floats(0.0, 0.9))
def test_quantile_breakpoints_strictly_increasing(k, seed, frac_repeat):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=400)
    u[: int(frac_repeat * 400)] = 0.0  # a sensor parked at its baseline
    x = ident.quantile_breakpoints(u, k)
    assert len(x) == k and np.all(np.diff(x) > 0)
    assert x[0] == u.min() and x[-1] == u.max()


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    n = 300
    u = rng.normal(size=(4, n)).cumsum(axis=1) * 0.3
    y = rng.normal(size=n)
    xs1 = [ident.quantile_breakpoints(u[c], 4) for c in range(4)]
    xi = np.linspace(-3.0, 3.0, 4)
    prob = ident.hw_problem(u, y, xs1, xi, order=(2, 2, 1))
    worst = 0.0
    for _ in range(50):
        theta = rng.normal(size=prob.size)
        y1, b, a, eta = prob.unpack(theta)
        theta = prob.pack(y1, b, ident.stabilize(np.concatenate([[1.0], 0.4 * np.tanh(a[1:])])), eta)
        worst = max(worst, float(ident.hw_jacobian_check(prob, theta).max()))
    assert worst < 1e-4


def test_linear_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    u = rng.normal(size=(4, 300))
    prob = ident.linear_problem(u, rng.normal(size=300), order=(3, 2, 1))
    theta = prob.pack(rng.normal(size=(4, 3)), np.real(np.poly([0.5, -0.3])), 2.0)
    _, J = prob(theta, True)
    for j in range(len(theta)):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (prob(tp, False)[0] - prob(tm, False)[0]) / (2 * h)
        assert np.linalg.norm(J[:, j] - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)

"""Synthetic treadmill walking: parametric GRFs and a piezoresistive sensor model.

Every numeric default here is an artifact choice picked to look like a
healthy adult walking; none of them is a measured value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq
from scipy.signal import lfilter, lfilter_zi

from .dataio import CHANNELS, ChannelSeries, GrfRecording, InsoleRecording, Trial, resample_sync
from .model_core import HwModel, LtiBlock, PwlFunction, hw_simulate, lti_filter, normalize_hw, pwl_eval

_DIP_WIDTH = 0.12  # width of the mid-stance valley, fraction of stance
_SHAPE_GRID = np.linspace(0.0, 1.0, 4001)


@dataclass(frozen=True)
class GaitProfile:
    speed_mps: float = 1.0
    cycle_s: float = 1.1
    duty: float = 0.62
    body_weight_n: float = 750.0
    fv_peak_n: float = 825.0
    fv_trough_frac: float = 0.75
    ml_peak_n: float = 40.0
    ml_trough_frac: float = 0.3
    # load window of each sensor in % of the gait cycle
    phase_onsets: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"HL": (0.0, 36.0), "MF": (5.0, 44.0), "MT": (11.0, 56.0), "TO": (18.0, 62.0)}
    )
    channel_weights: Mapping[str, float] = field(
        default_factory=lambda: {"HL": 1.0, "MF": 0.45, "MT": 1.0, "TO": 0.55}
    )
    standing_shares: Mapping[str, float] = field(
        default_factory=lambda: {"HL": 0.45, "MF": 0.15, "MT": 0.3, "TO": 0.1}
    )
    window_ramp_pct: float = 4.0
    stand_s: float = 2.0
    lift_s: float = 0.15
    period_jitter: float = 0.02
    amp_jitter: float = 0.03

    def __post_init__(self):
        if not 0 < self.duty < 1:
            raise ValueError("duty must lie in (0, 1)")
        if not self.fv_peak_n > 0:
            raise ValueError("fv_peak_n must be positive")
        onsets = [self.phase_onsets[c][0] for c in CHANNELS]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("sensor onsets must be ordered HL <= MF <= MT <= TO")


def profile_for_speed(speed_mps: float, base: GaitProfile = GaitProfile()) -> GaitProfile:
    """Stride period 1.1 s at 1 m/s, shortening linearly to 0.9 s at 2 m/s."""
    return replace(base, speed_mps=speed_mps, cycle_s=1.1 - 0.2 * (speed_mps - 1.0))


@dataclass(frozen=True)
class SensorLaw:
    """Per-channel static law R = r0 * (1 - a F / (F + f_half)) plus dynamics."""

    r0: Mapping[str, float] = field(default_factory=lambda: {"HL": 1000.0, "MF": 1400.0, "MT": 900.0, "TO": 1600.0})
    a: Mapping[str, float] = field(default_factory=lambda: {"HL": 0.7, "MF": 0.6, "MT": 0.75, "TO": 0.65})
    f_half: Mapping[str, float] = field(default_factory=lambda: {"HL": 250.0, "MF": 120.0, "MT": 220.0, "TO": 100.0})
    lag_tau_s: float = 0.03
    hysteresis_width: float = 10.0  # N, play-operator width
    noise_sigma: float = 0.5  # ohms

    def __post_init__(self):
        for c in CHANNELS:
            if not self.r0[c] > 0 or not self.f_half[c] > 0:
                raise ValueError("r0 and f_half must be positive")
            if not 0 < self.a[c] < 1:
                raise ValueError("sensitivity a must lie in (0, 1) to keep R positive")

    def static(self, c: str, force) -> np.ndarray:
        f = np.asarray(force, dtype=float)
        return self.r0[c] * (1.0 - self.a[c] * f / (f + self.f_half[c]))


def linearized_law(law: SensorLaw, scale: float = 50.0) -> SensorLaw:
    """Push saturation far outside the working range (f_half x ``scale``).

    In that regime a F / (F + f_half) ~ a F / f_half, so resistance falls in
    proportion to force. Noise is shrunk by the same factor to keep the
    signal-to-noise ratio, and hysteresis is removed.
    """
    fh = {c: law.f_half[c] * scale for c in CHANNELS}
    return replace(law, f_half=fh, hysteresis_width=0.0, noise_sigma=law.noise_sigma / scale)


# --------------------------------------------------------------------------
# force templates


def _raw_shape(s: np.ndarray, p: float, depth: float) -> np.ndarray:
    env = np.sin(np.pi * np.clip(s, 0.0, 1.0)) ** p
    dip = 1.0 - depth * np.exp(-(((s - 0.5) / _DIP_WIDTH) ** 2))
    return env * dip


def _depth_for_trough(p: float, trough: float) -> float:
    def valley_ratio(depth):
        g = _raw_shape(_SHAPE_GRID, p, depth)
        return g[len(g) // 2] / g.max() - trough

    if valley_ratio(0.0) <= 0:
        return 0.0
    return brentq(valley_ratio, 0.0, 0.999, xtol=1e-12)


@lru_cache(maxsize=64)
def stance_shape_params(trough: float, target_mean: float | None) -> tuple[float, float, float]:
    """(exponent, dip depth, peak) for a double-hump stance template.

    The template is zero at both ends, peaks at 1 after division by ``peak``,
    dips to ``trough`` at mid-stance and, when ``target_mean`` is given, has
    that mean over the stance phase.
    """

    def mean_err(p):
        depth = _depth_for_trough(p, trough)
        g = _raw_shape(_SHAPE_GRID, p, depth)
        return trapezoid(g / g.max(), _SHAPE_GRID) - target_mean

    if target_mean is None:
        p = 1.0
    else:
        p = brentq(mean_err, 0.05, 20.0, xtol=1e-12)
    depth = _depth_for_trough(p, trough)
    peak = float(_raw_shape(_SHAPE_GRID, p, depth).max())
    return p, depth, peak


def stance_template(s, trough: float, target_mean: float | None = None) -> np.ndarray:
    """Normalized force over stance fraction ``s`` in [0, 1] (zero outside)."""
    s = np.asarray(s, dtype=float)
    p, depth, peak = stance_shape_params(round(trough, 12), None if target_mean is None else round(target_mean, 12))
    out = _raw_shape(s, p, depth) / peak
    # the envelope vanishes at both ends; sin(pi) is not exactly 0 in floating point
    return np.where((s > 0) & (s < 1), out, 0.0)


def _window(pct: np.ndarray, on: float, off: float, ramp: float) -> np.ndarray:
    """Raised-cosine load window on [on, off] with ramps of ``ramp`` percent."""
    w = np.zeros_like(pct)
    inside = (pct >= on) & (pct <= off)
    up = np.clip((pct - on) / ramp, 0.0, 1.0)
    down = np.clip((off - pct) / ramp, 0.0, 1.0)
    edge = np.minimum(up, down)
    w[inside] = 0.5 - 0.5 * np.cos(np.pi * edge[inside])
    return w


def stride_schedule(profile: GaitProfile, duration_s: float, seed, speeds: Sequence[tuple[float, float]] | None = None):
    """Left-foot heel-strike times, stride periods and amplitude factors.

    ``speeds`` is a list of (speed_mps, segment_duration_s); the stride period
    of each stride follows the speed active at its heel strike.
    """
    rng = np.random.default_rng(seed)
    segments = list(speeds) if speeds else [(profile.speed_mps, duration_s)]
    bounds = np.cumsum([d for _, d in segments])

    def period_at(t):
        i = min(int(np.searchsorted(bounds, t - profile.stand_s, side="right")), len(segments) - 1)
        return profile_for_speed(segments[i][0], profile).cycle_s if speeds else profile.cycle_s

    t = profile.stand_s + (1.0 - profile.duty) * period_at(profile.stand_s)
    times, periods, amps = [], [], []
    while t < duration_s + 2.0:
        T = period_at(t) * (1.0 + rng.uniform(-profile.period_jitter, profile.period_jitter))
        times.append(t)
        periods.append(T)
        amps.append(1.0 + rng.uniform(-profile.amp_jitter, profile.amp_jitter))
        t += T
    return np.array(times), np.array(periods), np.array(amps)


def synth_grf(
    profile: GaitProfile,
    duration_s: float,
    rate_hz: float = 100.0,
    seed=0,
    side: str = "left",
    speeds: Sequence[tuple[float, float]] | None = None,
    bounce: bool = False,
    schedule=None,
):
    """Vertical and mediolateral GRF for one foot plus the truth record.

    The trace opens with ``stand_s`` of quiet standing at half body weight,
    lifts the foot, then walks. Returns (GrfRecording, truth) where truth
    holds heel-strike times/indices, per-channel forces (4, N), stride
    periods and the stance mask.
    """
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    times, periods, amps = schedule if schedule is not None else stride_schedule(profile, duration_s, seed, speeds)
    if side == "right":
        # right heel strikes halfway between left ones
        times = 0.5 * (times[:-1] + times[1:])
        periods = 0.5 * (periods[:-1] + periods[1:])
        amps = amps[1:]

    target_mean = profile.body_weight_n / (2.0 * profile.duty * profile.fv_peak_n)
    fv = np.zeros(n)
    ml = np.zeros(n)
    pct = np.full(n, -1.0)  # gait-cycle percent, -1 before the first heel strike
    for hs, T, A in zip(times, periods, amps):
        i0 = int(np.ceil(hs * rate_hz - 1e-9))
        i1 = min(int(np.ceil((hs + T) * rate_hz - 1e-9)), n)
        if i0 >= n:
            break
        # time since touch-down, snapped to 1 ns so sample-aligned cycles
        # repeat bit for bit and stance ends on an exact zero
        tau = np.round(t[i0:i1] - hs, 9)
        pct[i0:i1] = tau / T * 100.0
        s = tau / (profile.duty * T)
        fv[i0:i1] = A * profile.fv_peak_n * stance_template(s, profile.fv_trough_frac, target_mean)
        ml[i0:i1] = A * profile.ml_peak_n * stance_template(s, profile.ml_trough_frac)
        if bounce:
            # contact chatter: the force collapses once shortly after touch-down
            notch = np.exp(-(((tau - 0.07) / 0.02) ** 2))
            fv[i0:i1] *= np.where(tau < 0.2, 1.0 - notch, 1.0)

    # quiet standing, then a smooth lift-off of this foot
    first = times[0] if len(times) else duration_s
    lift_at = profile.stand_s if side == "left" else max(profile.stand_s, first - (1 - profile.duty) * periods[0])
    stand_force = 0.5 * profile.body_weight_n
    ramp = np.clip((t - lift_at) / profile.lift_s, 0.0, 1.0)
    standing = (t < first) * stand_force * (0.5 + 0.5 * np.cos(np.pi * ramp))
    fv = np.where(t < first, standing, fv)
    if side == "right":
        ml = -ml

    # per-channel force: load windows during stance, fixed shares while standing
    wts = np.zeros((len(CHANNELS), n))
    walking = pct >= 0
    for i, c in enumerate(CHANNELS):
        on, off = profile.phase_onsets[c]
        wts[i, walking] = profile.channel_weights[c] * _window(pct[walking], on, off, profile.window_ramp_pct)
        wts[i, ~walking] = profile.standing_shares[c]
    tot = wts.sum(axis=0)
    shares = np.divide(wts, tot, out=np.zeros_like(wts), where=tot > 0)
    chan_force = shares * fv

    grf = GrfRecording(
        ChannelSeries(fv, rate_hz, "newtons"),
        ChannelSeries(ml, rate_hz, "newtons"),
        side,
    )
    valid = times[times < (n - 1) / rate_hz]
    truth = {
        "heel_strike_times": valid,
        "heel_strike_indices": np.ceil(valid * rate_hz - 1e-9).astype(int),
        "periods": periods[: len(valid)],
        "channel_forces": chan_force,
        "stance": fv > 0,
        "gait_pct": pct,
    }
    return grf, truth


def play_operator(x: np.ndarray, width: float) -> np.ndarray:
    """Backlash (play) hysteresis of total ``width``, starting at x[0]."""
    if width <= 0:
        return np.asarray(x, dtype=float).copy()
    h = 0.5 * width
    out = np.empty(len(x))
    y = x[0]
    for i, xi in enumerate(x):
        y = min(max(y, xi - h), xi + h)
        out[i] = y
    return out


def first_order_lag(x: np.ndarray, tau_s: float, rate_hz: float) -> np.ndarray:
    """Zero-order-hold first-order lag, initialized at steady state on x[0]."""
    if tau_s <= 0:
        return np.asarray(x, dtype=float).copy()
    e = np.exp(-1.0 / (rate_hz * tau_s))
    b, a = [0.0, 1.0 - e], [1.0, -e]
    y, _ = lfilter(b, a, x, zi=lfilter_zi(b, a) * x[0])
    return y


def synth_sensor(
    channel_forces: np.ndarray,
    law: SensorLaw = SensorLaw(),
    rate_hz: float = 100.0,
    seed=0,
    side: str = "left",
) -> InsoleRecording:
    """Resistances (ohms) of the four sensors under the given channel forces.

    Per channel: play-operator hysteresis on force, the saturating static
    law, a first-order lag, then additive Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    chans = {}
    for i, c in enumerate(CHANNELS):
        f = play_operator(np.asarray(channel_forces[i], dtype=float), law.hysteresis_width)
        f = np.maximum(f, 0.0)
        r = first_order_lag(law.static(c, f), law.lag_tau_s, rate_hz)
        if law.noise_sigma > 0:
            r = r + rng.normal(0.0, law.noise_sigma, len(r))
        chans[c] = ChannelSeries(np.maximum(r, 1e-3 * law.r0[c]), rate_hz, "ohms")
    return InsoleRecording(chans, side)


def _seed_seq(seed, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(k) for k in keys]])


def synth_trial(
    profile: GaitProfile = GaitProfile(),
    law: SensorLaw = SensorLaw(),
    speeds: Sequence[float] = (1.0,),
    segment_s: float = 40.0,
    rate_hz: float = 100.0,
    seed=0,
    side: str = "left",
    role: str = "identification",
    name: str = "",
    bounce: bool = False,
) -> tuple[Trial, dict]:
    """One continuous walking trial through all ``speeds`` in sequence."""
    segs = [(float(s), segment_s) for s in speeds]
    duration = profile.stand_s + segment_s * len(speeds)
    ss = _seed_seq(seed, 0)
    sched_seed, sensor_seed = ss.spawn(2)
    schedule = stride_schedule(profile, duration, sched_seed, segs)
    grf, truth = synth_grf(profile, duration, rate_hz, side=side, speeds=segs, bounce=bounce, schedule=schedule)
    sensor_seed = sensor_seed.spawn(2)[0 if side == "left" else 1]
    insole = synth_sensor(truth["channel_forces"], law, rate_hz, sensor_seed, side)
    speed = float(speeds[0]) if len(speeds) == 1 else tuple(float(s) for s in speeds)
    trial = resample_sync(insole, grf, rate_hz, 0.0, speed_mps=speed, role=role, name=name)
    return trial, truth


def synth_dataset(
    profile: GaitProfile = GaitProfile(),
    law: SensorLaw = SensorLaw(),
    speeds: Sequence[float] = (1.0, 1.5, 2.0),
    trial_count: int = 3,
    seed=0,
    segment_s: float = 40.0,
    rate_hz: float = 100.0,
    sides: Sequence[str] = ("left", "right"),
    bounce: bool = False,
) -> list[tuple[Trial, dict]]:
    """The walking protocol: ``trial_count`` repeats of the speed sequence.

    Trial 1 is the identification trial, the rest are validation trials.
    Both feet come from the same walk. Returns (Trial, truth) pairs ordered
    by trial then side; trial names look like ``trial1_left``.
    """
    out = []
    for i in range(trial_count):
        role = "identification" if i == 0 else "validation"
        for side in sides:
            trial, truth = synth_trial(
                profile, law, speeds, segment_s, rate_hz, seed=_seed_seq(seed, i + 1).generate_state(1)[0],
                side=side, role=role, name=f"trial{i + 1}_{side}", bounce=bounce,
            )
            out.append((trial, truth))
    return out


def _random_monotone_pwl(x: np.ndarray, rng: np.random.Generator, increasing: bool) -> np.ndarray:
    steps = rng.uniform(0.2, 1.0, len(x) - 1) * np.diff(x)
    y = np.concatenate([[0.0], np.cumsum(steps)])
    return y if increasing else -y


def make_truth_hw(k: int, seed, dr: np.ndarray | None = None, order: tuple[int, int, int] = (3, 2, 0),
                  output_std: float = 150.0) -> HwModel:
    """Random stable HW model with monotone ``k``-breakpoint nonlinearities.

    Input breakpoints span the 1st-99th percentile range of each channel of
    ``dr`` (or -60..30 % without data); the output map spans the LTI output
    range on ``dr``. The f1 outputs are normalized to unit std on ``dr``.
    """
    rng = np.random.default_rng(seed)
    nb, na, nk = order
    if dr is None:
        dr = rng.uniform(-60.0, 30.0, (len(CHANNELS), 2000))
    dr = np.asarray(dr, dtype=float)

    f1 = {}
    for i, c in enumerate(CHANNELS):
        lo, hi = np.percentile(dr[i], [1, 99])
        base = np.linspace(lo, hi, k)
        jitter = rng.uniform(-0.25, 0.25, k) * (hi - lo) / (k - 1)
        jitter[[0, -1]] = 0.0
        x = np.sort(base + jitter)
        f1[c] = PwlFunction(x, _random_monotone_pwl(x, rng, increasing=bool(rng.integers(2))))

    poles = []
    while len(poles) < na:
        if na - len(poles) >= 2 and rng.random() < 0.5:
            r, th = rng.uniform(0.3, 0.85), rng.uniform(0.05, 0.6)
            poles += [r * np.exp(1j * th), r * np.exp(-1j * th)]
        else:
            poles.append(rng.uniform(-0.2, 0.85))
    a = np.real(np.poly(poles)) if na else np.array([1.0])
    b = rng.normal(0.0, 1.0, (len(CHANNELS), nb))
    g = LtiBlock(b, a, (nk,) * len(CHANNELS))
    ident_f2 = PwlFunction([0.0, 1.0], [0.0, 1.0])
    model, norm = normalize_hw(HwModel(f1, g, ident_f2), dr)
    v = lti_filter(model.g, np.vstack([pwl_eval(model.f1[c], dr[i]) for i, c in enumerate(CHANNELS)]))
    lo, hi = np.percentile(v, [1, 99])
    xs = np.linspace(lo, hi, k)
    ys = _random_monotone_pwl(xs, rng, increasing=True)
    f2 = PwlFunction(xs, ys)
    sd = float(np.std(pwl_eval(f2, v))) or 1.0
    f2 = PwlFunction(xs, ys * output_std / sd)
    return HwModel(model.f1, model.g, f2, norm, {"kind": "hw", "truth": True, "breakpoints": k, "seed": int(seed)})


def truth_trial(model: HwModel, trial: Trial, noise_frac: float = 0.0, seed=0,
                component: str = "vertical") -> Trial:
    """Replace ``component`` of ``trial`` with the truth model's output.

    ``noise_frac`` adds multiplicative Gaussian noise y * (1 + noise_frac * e).
    """
    y = hw_simulate(model, trial.dr)
    if noise_frac > 0:
        y = y * (1.0 + noise_frac * np.random.default_rng(seed).normal(size=len(y)))
    rate, t0 = trial.rate_hz, trial.grf.vertical.t0
    series = ChannelSeries(y, rate, "newtons", t0)
    grf = replace(trial.grf, **{component: series})
    return replace(trial, grf=grf)


@dataclass(frozen=True)
class SimConfig:
    """Flat knobs for a simulated protocol run (the ``[sim]`` config table)."""

    seed: int = 0
    speeds: tuple[float, ...] = (1.0, 1.5, 2.0)
    trial_count: int = 3
    segment_s: float = 40.0
    rate_hz: float = 100.0
    sides: tuple[str, ...] = ("left", "right")
    noise_sigma: float = 0.5
    hysteresis_width: float = 10.0
    lag_tau_s: float = 0.03
    linearized: bool = False
    linearize_scale: float = 50.0
    body_weight_n: float = 750.0
    bounce: bool = False
    truth_k: int = 0  # > 0 replaces the vertical force with a random truth HW model
    truth_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
        object.__setattr__(self, "sides", tuple(self.sides))
        if self.trial_count < 1 or not self.speeds:
            raise ValueError("need at least one trial and one speed")
        if any(s not in ("left", "right") for s in self.sides):
            raise ValueError(f"sides must be left/right, got {self.sides}")

    def profile(self) -> GaitProfile:
        return GaitProfile(body_weight_n=self.body_weight_n, fv_peak_n=1.1 * self.body_weight_n)

    def law(self) -> SensorLaw:
        law = SensorLaw(lag_tau_s=self.lag_tau_s, hysteresis_width=self.hysteresis_width, noise_sigma=self.noise_sigma)
        if self.linearized:
            law = linearized_law(law, self.linearize_scale)
        return law

    def dataset(self) -> list[tuple[Trial, dict]]:
        return synth_dataset(
            self.profile(), self.law(), self.speeds, self.trial_count, self.seed,
            self.segment_s, self.rate_hz, self.sides, self.bounce,
        )

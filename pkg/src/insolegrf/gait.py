"""Gait events, cycle normalization, error-bar statistics and stance phases."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataio import CHANNELS, ChannelSeries
from .errors import FewerThanTwoEvents, NoCyclesFound

N_POINTS = 101
PCT = np.linspace(0.0, 100.0, N_POINTS)

PHASES = ("heel-strike", "loading", "mid-stance", "terminal-stance/toe-off", "swing")


@dataclass(frozen=True)
class GaitSegmentation:
    heel_strike_indices: np.ndarray
    cycles: np.ndarray  # (n_included, 101)
    cycle_ids: np.ndarray  # index of the inter-event span behind each row
    excluded_cycles: tuple[tuple[int, str], ...] = ()

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)


@dataclass(frozen=True)
class CycleStats:
    mean: np.ndarray
    std: np.ndarray
    n: int


@dataclass(frozen=True)
class PhaseTimeline:
    labels: tuple[str, ...]
    active: Mapping[str, np.ndarray]
    onsets: Mapping[str, float | None]
    releases: Mapping[str, float | None]
    ordering_consistent: bool
    issues: tuple[str, ...] = field(default=())

    def is_well_formed(self) -> bool:
        """True if the cycle is one stance run followed by one swing run.

        The final point (100 %) repeats the next heel strike and is ignored.
        """
        swing = np.array([lab == "swing" for lab in self.labels[:-1]])
        if swing.all() or not swing.any():
            return False
        first_swing = int(np.argmax(swing))
        return first_swing > 0 and bool(swing[first_swing:].all())


def _values(x) -> tuple[np.ndarray, float | None]:
    if isinstance(x, ChannelSeries):
        return x.values, x.rate_hz
    return np.asarray(x, dtype=float), None


def detect_heel_strikes(
    fv,
    threshold_frac: float = 0.05,
    min_cycle_s: float = 0.4,
    rate_hz: float | None = None,
    onset_frac: float = 0.1,
) -> np.ndarray:
    """Contact-onset sample indices from a vertical force trace.

    A contact is a rising crossing of the level ``threshold_frac`` of the way
    from the 5th to the 95th percentile of ``fv``, so a nonzero unloaded
    baseline does not shift the threshold. Crossings closer than
    ``min_cycle_s`` to the last accepted one are ignored. Each accepted
    crossing is walked back to the first sample above ``onset_frac`` of the
    threshold height, which places the event at the start of the loading
    ramp rather than partway up it.
    """
    x, rate = _values(fv)
    rate = rate or rate_hz
    if rate is None:
        raise ValueError("rate_hz is required for plain arrays")
    if not 0 < threshold_frac < 0.5:
        raise ValueError("threshold_frac must lie in (0, 0.5)")
    if len(x) < 2:
        raise NoCyclesFound("signal too short")
    base = float(np.percentile(x, 5))
    top = float(np.percentile(x, 95))
    if not top > base:
        raise NoCyclesFound("signal has no load variation")
    thr = base + threshold_frac * (top - base)
    floor = base + onset_frac * (thr - base)
    above = x > thr
    crossings = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    min_gap = min_cycle_s * rate
    events: list[int] = []
    last_cross = -np.inf
    for i in crossings:
        if i - last_cross < min_gap:
            continue
        last_cross = i
        lo = events[-1] + 1 if events else 0
        j = int(i)
        while j - 1 >= lo and x[j - 1] > floor:
            j -= 1
        events.append(j)
    if not events:
        raise NoCyclesFound("no rising threshold crossings")
    return np.asarray(events, dtype=int)


def detect_heel_strikes_from_sensor(dr_hl, **kw) -> np.ndarray:
    """Fallback detector on the negated heel resistance change."""
    x, rate = _values(dr_hl)
    if rate is not None:
        kw.setdefault("rate_hz", rate)
    return detect_heel_strikes(-x, **kw)


def segment_cycles(
    x,
    events,
    n_points: int = N_POINTS,
    span_limits: tuple[float, float] = (0.5, 2.0),
) -> GaitSegmentation:
    """Resample each inter-event span onto a 0-100% axis.

    Spans shorter or longer than ``span_limits`` times the median span are
    excluded and reported with a reason.
    """
    vals, _ = _values(x)
    events = np.asarray(events, dtype=int)
    if len(events) < 2:
        raise FewerThanTwoEvents(f"need at least two events, got {len(events)}")
    if np.any(np.diff(events) <= 0):
        raise ValueError("events must be strictly increasing")
    if events[0] < 0 or events[-1] >= len(vals):
        raise ValueError("events fall outside the signal")
    spans = np.diff(events).astype(float)
    med = float(np.median(spans))
    lo, hi = span_limits
    frac = np.linspace(0.0, 1.0, n_points)
    rows, ids, excluded = [], [], []
    for i, span in enumerate(spans):
        if span < lo * med or span > hi * med:
            excluded.append((i, f"span {int(span)} samples outside [{lo}, {hi}] x median {med:g}"))
            continue
        # interpolate in span-local coordinates so equal spans see equal positions
        a, b = events[i], events[i + 1]
        rows.append(np.interp(frac * span, np.arange(b - a + 1), vals[a:b + 1]))
        ids.append(i)
    cycles = np.array(rows) if rows else np.zeros((0, n_points))
    return GaitSegmentation(events, cycles, np.asarray(ids, dtype=int), tuple(excluded))


def cycle_stats(seg: GaitSegmentation) -> CycleStats:
    """Pointwise mean and sample standard deviation across included cycles."""
    if seg.n_cycles == 0:
        raise NoCyclesFound("no included cycles")
    # centring on the first row keeps identical cycles exact (zero spread)
    ref = seg.cycles[0]
    dev = seg.cycles - ref
    mean = ref + dev.mean(axis=0)
    if seg.n_cycles > 1:
        std = dev.std(axis=0, ddof=1)
    else:
        std = np.zeros_like(mean)
    return CycleStats(mean, std, seg.n_cycles)


def _activation(mean: np.ndarray, frac: float) -> np.ndarray:
    # loading lowers resistance, so the unloaded level is the cycle maximum
    rng = float(mean.max() - mean.min())
    if not rng > 0:
        return np.zeros(len(mean), dtype=bool)
    return (mean.max() - mean) > frac * rng


def _label(active: set[str]) -> str:
    if not active:
        return "swing"
    if active == {"HL"}:
        return "heel-strike"
    if len(active) == len(CHANNELS):
        return "mid-stance"
    if "HL" in active:
        return "loading"
    if "MF" in active:
        return "mid-stance"
    return "terminal-stance/toe-off"


def classify_phases(
    sensor_cycles: Mapping[str, CycleStats],
    grf_cycle: CycleStats | None = None,
    activation_frac: float = 0.2,
    stance_frac: float = 0.05,
) -> PhaseTimeline:
    """Label each percent of the gait cycle from the sensor activation pattern.

    A channel counts as active where its mean resistance change lies more than
    ``activation_frac`` of its cycle range below its unloaded level. When a
    force cycle is supplied it decides stance versus swing: swing is forced
    where the mean force is below ``stance_frac`` of its peak, and stance
    samples with no active sensor inherit the nearest stance label, with
    distance measured around the cycle.
    """
    active = {c: _activation(np.asarray(sensor_cycles[c].mean), activation_frac) for c in CHANNELS}
    n = len(next(iter(active.values())))
    labels = [_label({c for c in CHANNELS if active[c][i]}) for i in range(n)]

    if grf_cycle is not None:
        f = np.asarray(grf_cycle.mean)
        stance = f > stance_frac * f.max() if f.max() > 0 else np.zeros(n, dtype=bool)
        for i in range(n):
            if not stance[i]:
                labels[i] = "swing"
        known = [i for i in range(n) if stance[i] and labels[i] != "swing"]
        period = n - 1  # 0 % and 100 % are the same instant

        def gap(i, j):
            d = abs(j - i)
            return min(d, period - d)

        for i in range(n):
            if stance[i] and labels[i] == "swing" and known:
                nearest = min(known, key=lambda j: (gap(i, j), j))
                labels[i] = labels[nearest]

    pct = np.linspace(0.0, 100.0, n)
    onsets, releases = {}, {}
    for c in CHANNELS:
        on = np.flatnonzero(active[c])
        onsets[c] = float(pct[on[0]]) if len(on) else None
        releases[c] = float(pct[on[-1]]) if len(on) else None

    issues = []
    seen_on = [(c, onsets[c]) for c in CHANNELS if onsets[c] is not None]
    seen_off = [(c, releases[c]) for c in CHANNELS if releases[c] is not None]
    for (ca, a), (cb, b) in zip(seen_on, seen_on[1:]):
        if b < a:
            issues.append(f"onset of {cb} ({b}%) precedes {ca} ({a}%)")
    for (ca, a), (cb, b) in zip(seen_off, seen_off[1:]):
        if b < a:
            issues.append(f"release of {cb} ({b}%) precedes {ca} ({a}%)")
    return PhaseTimeline(tuple(labels), active, onsets, releases, not issues, tuple(issues))


def onset_order(timeline: PhaseTimeline) -> list[str]:
    """Channels sorted by activation onset (stable in HL, MF, MT, TO order)."""
    chans = [c for c in CHANNELS if timeline.onsets[c] is not None]
    return sorted(chans, key=lambda c: timeline.onsets[c])


def release_order(timeline: PhaseTimeline) -> list[str]:
    chans = [c for c in CHANNELS if timeline.releases[c] is not None]
    return sorted(chans, key=lambda c: timeline.releases[c])

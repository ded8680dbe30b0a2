"""Fit metrics for force estimates: NRMSE fit, cycle-averaged R^2, RMSE variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import gait
from .errors import ConstantReference, DegenerateData, DegenerateNormalizer


@dataclass(frozen=True)
class FitReport:
    nrmse_fit_pct: float
    r_squared: float  # on the averaged gait cycle
    rmse_abs: float
    rmse_norm_max_pct: float
    rmse_norm_range_pct: float
    n_samples: int
    warmup_excluded: int
    # transparency extras: time-series R^2 and RMSE on averaged cycles
    r_squared_timeseries: float = math.nan
    rmse_abs_cycles: float = math.nan
    rmse_norm_max_cycles_pct: float = math.nan
    rmse_norm_range_cycles_pct: float = math.nan
    n_cycles: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


FIT_FIELDS = tuple(FitReport.__dataclass_fields__)


def _pair(f, fhat) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=float).ravel()
    fhat = np.asarray(fhat, dtype=float).ravel()
    if f.shape != fhat.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {fhat.shape}")
    if len(f) < 2:
        raise ValueError("need at least two samples")
    return f, fhat


def nrmse_fit(f, fhat) -> float:
    """100 * (1 - ||f - fhat|| / ||f - mean(f)||), two-norms."""
    f, fhat = _pair(f, fhat)
    den = np.linalg.norm(f - f.mean())
    if den == 0:
        raise ConstantReference("reference series is constant")
    return float(100.0 * (1.0 - np.linalg.norm(f - fhat) / den))


def r_squared(f, fhat) -> float:
    f, fhat = _pair(f, fhat)
    ss_tot = np.sum((f - f.mean()) ** 2)
    if ss_tot == 0:
        raise ConstantReference("reference series is constant")
    return float(1.0 - np.sum((f - fhat) ** 2) / ss_tot)


def r_squared_cycles(f_avg, fhat_avg) -> float:
    """Coefficient of determination between two averaged gait cycles."""
    return r_squared(f_avg, fhat_avg)


def rmse(f, fhat) -> float:
    f, fhat = _pair(f, fhat)
    return float(np.sqrt(np.mean((f - fhat) ** 2)))


def rmse_normalized(f, fhat, mode: str = "max") -> float:
    """RMSE in percent of max(f) (``mode='max'``) or of max(f) - min(f)."""
    f, fhat = _pair(f, fhat)
    if mode == "max":
        scale = f.max()
    elif mode == "range":
        scale = f.max() - f.min()
    else:
        raise ValueError(f"mode must be 'max' or 'range', got {mode!r}")
    if not scale > 0:
        raise DegenerateNormalizer(f"normalizer for mode {mode!r} is {scale}")
    return float(100.0 * rmse(f, fhat) / scale)


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except DegenerateData:
        return math.nan


def fit_report(
    f,
    fhat,
    warmup: int = 0,
    events=None,
) -> FitReport:
    """All metrics for one measured/estimated pair.

    The first ``warmup`` samples are dropped from the time-series metrics.
    ``events`` (heel-strike indices) enables the averaged-cycle metrics.
    """
    f, fhat = _pair(f, fhat)
    fw, hw = f[warmup:], fhat[warmup:]
    cyc = {"r_squared": math.nan, "rmse_abs_cycles": math.nan,
           "rmse_norm_max_cycles_pct": math.nan, "rmse_norm_range_cycles_pct": math.nan, "n_cycles": 0}
    if events is not None:
        ev = np.asarray(events)
        ev = ev[ev >= warmup]
        if len(ev) >= 2:
            seg_f = gait.segment_cycles(f, ev)
            if seg_f.n_cycles:
                seg_h = gait.segment_cycles(fhat, ev)
                mf = gait.cycle_stats(seg_f).mean
                mh = gait.cycle_stats(seg_h).mean
                cyc = {
                    "r_squared": _or_nan(r_squared_cycles, mf, mh),
                    "rmse_abs_cycles": rmse(mf, mh),
                    "rmse_norm_max_cycles_pct": _or_nan(rmse_normalized, mf, mh, "max"),
                    "rmse_norm_range_cycles_pct": _or_nan(rmse_normalized, mf, mh, "range"),
                    "n_cycles": seg_f.n_cycles,
                }
    return FitReport(
        nrmse_fit_pct=nrmse_fit(fw, hw),
        rmse_abs=rmse(fw, hw),
        rmse_norm_max_pct=_or_nan(rmse_normalized, fw, hw, "max"),
        rmse_norm_range_pct=_or_nan(rmse_normalized, fw, hw, "range"),
        n_samples=len(fw),
        warmup_excluded=warmup,
        r_squared_timeseries=r_squared(fw, hw),
        **cyc,
    )


def trial_events(trial) -> np.ndarray | None:
    """Heel strikes from the trial's measured vertical force, or None."""
    try:
        return gait.detect_heel_strikes(trial.grf.vertical)
    except DegenerateData:
        return None


def full_report(trial, model, seg: gait.GaitSegmentation | None = None, component: str | None = None) -> FitReport:
    """Simulate ``model`` on ``trial`` and score it against the measured force.

    ``component`` defaults to the one recorded in the model metadata. Cycle
    boundaries come from ``seg`` or, failing that, from the measured vertical
    force of the trial.
    """
    from .model_core import simulate

    component = component or model.meta.get("component", "vertical")
    fhat = simulate(model, trial.dr)
    events = seg.heel_strike_indices if seg is not None else trial_events(trial)
    return fit_report(trial.target(component), fhat, model.warmup, events)

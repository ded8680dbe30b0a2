"""Insole and force-plate data: containers, unit conversion, sync and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    EmptyFile,
    InsufficientOverlap,
    InvalidVoltage,
    NonPositiveBaseline,
    SchemaError,
    UnitError,
    WindowTooLong,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

CHANNELS = ("HL", "MF", "MT", "TO")
UNITS = ("volts", "ohms", "percent", "newtons")
SIDES = ("left", "right")
ROLES = ("identification", "validation")
COMPONENTS = ("vertical", "mediolateral")

INSOLE_HEADER = ["t", "hl", "mf", "mt", "to"]
GRF_HEADER = ["t", "fv", "fml"]

# fraction of rail-violating ADC samples tolerated before a channel is rejected
MAX_INVALID_FRAC = 0.01
MIN_OVERLAP_S = 5.0


@dataclass(frozen=True)
class ChannelSeries:
    values: np.ndarray
    rate_hz: float
    unit: str
    t0: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("ChannelSeries values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("ChannelSeries values must be finite")
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        if self.unit not in UNITS:
            raise UnitError(f"unknown unit {self.unit!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "rate_hz", float(self.rate_hz))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def duration_s(self) -> float:
        return len(self.values) / self.rate_hz

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.values)) / self.rate_hz


@dataclass(frozen=True)
class AdcConfig:
    v_in: float = 5.0
    r_bias: float = 560.0
    bits: int = 16

    def __post_init__(self):
        if not self.v_in > 0:
            raise ValueError("v_in must be positive")
        if not self.r_bias > 0:
            raise ValueError("r_bias must be positive")
        if not 8 <= self.bits <= 32:
            raise ValueError("bits must lie in [8, 32]")

    @property
    def lsb(self) -> float:
        return self.v_in / 2**self.bits


@dataclass(frozen=True)
class InsoleRecording:
    channels: Mapping[str, ChannelSeries]
    side: str

    def __post_init__(self):
        if set(self.channels) != set(CHANNELS):
            raise SchemaError(f"insole needs channels {CHANNELS}, got {sorted(self.channels)}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        first = self.channels[CHANNELS[0]]
        for name in CHANNELS[1:]:
            ch = self.channels[name]
            if len(ch) != len(first) or ch.rate_hz != first.rate_hz or ch.unit != first.unit:
                raise SchemaError("insole channels must share length, rate and unit")
        object.__setattr__(self, "channels", {c: self.channels[c] for c in CHANNELS})

    @property
    def unit(self) -> str:
        return self.channels["HL"].unit

    @property
    def rate_hz(self) -> float:
        return self.channels["HL"].rate_hz

    @property
    def t0(self) -> float:
        return self.channels["HL"].t0

    def __len__(self) -> int:
        return len(self.channels["HL"])

    def matrix(self) -> np.ndarray:
        """Channel values stacked as a (4, N) array in HL, MF, MT, TO order."""
        return np.vstack([self.channels[c].values for c in CHANNELS])


@dataclass(frozen=True)
class GrfRecording:
    vertical: ChannelSeries
    mediolateral: ChannelSeries
    side: str

    def __post_init__(self):
        v, ml = self.vertical, self.mediolateral
        if v.unit != "newtons" or ml.unit != "newtons":
            raise UnitError("GRF components must be in newtons")
        if len(v) != len(ml) or v.rate_hz != ml.rate_hz:
            raise SchemaError("GRF components must share length and rate")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")

    def component(self, name: str) -> ChannelSeries:
        if name == "vertical":
            return self.vertical
        if name == "mediolateral":
            return self.mediolateral
        raise ValueError(f"unknown GRF component {name!r}")


@dataclass(frozen=True)
class Trial:
    """A synchronized insole + force-plate recording.

    The insole is kept in ohms; ``dr`` gives the resistance change in percent
    relative to the per-channel standing baseline ``r0``.
    """

    insole: InsoleRecording
    grf: GrfRecording
    speed_mps: float | tuple[float, ...]
    role: str
    r0: Mapping[str, float]
    name: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.insole.unit != "ohms":
            raise UnitError("Trial insole channels must be resistances in ohms")
        if len(self.insole) != len(self.grf.vertical) or self.insole.rate_hz != self.grf.vertical.rate_hz:
            raise SchemaError("insole and GRF must share rate and length")
        if self.insole.side != self.grf.side:
            raise SchemaError("insole and GRF sides differ")
        if set(self.r0) != set(CHANNELS):
            raise SchemaError("r0 needs one baseline per channel")
        for c in CHANNELS:
            if not self.r0[c] > 0:
                raise NonPositiveBaseline(f"r0[{c}] = {self.r0[c]}")

    @property
    def side(self) -> str:
        return self.insole.side

    @property
    def rate_hz(self) -> float:
        return self.insole.rate_hz

    def __len__(self) -> int:
        return len(self.insole)

    @cached_property
    def dr(self) -> np.ndarray:
        """Resistance change in percent, shape (4, N)."""
        out = np.vstack(
            [resistance_to_delta(self.insole.channels[c], self.r0[c]).values for c in CHANNELS]
        )
        out.setflags(write=False)
        return out

    def target(self, component: str) -> np.ndarray:
        return self.grf.component(component).values


def divider_voltage(r: ChannelSeries, cfg: AdcConfig) -> ChannelSeries:
    """Voltage across the sensor leg of the divider for resistance ``r``."""
    if r.unit != "ohms":
        raise UnitError(f"expected ohms, got {r.unit}")
    v = cfg.v_in * r.values / (r.values + cfg.r_bias)
    return ChannelSeries(v, r.rate_hz, "volts", r.t0)


def volts_to_resistance(v_out: ChannelSeries, cfg: AdcConfig) -> ChannelSeries:
    """Invert the voltage divider: R = r_bias / (v_in / v_out - 1).

    Samples at or beyond the rails (v_out <= 0 or v_out >= v_in) are treated as
    invalid and linearly interpolated from valid neighbours, provided they make
    up at most 1% of the series.
    """
    if v_out.unit != "volts":
        raise UnitError(f"expected volts, got {v_out.unit}")
    v = v_out.values
    bad = (v <= 0.0) | (v >= cfg.v_in)
    n_bad = int(bad.sum())
    if n_bad > MAX_INVALID_FRAC * len(v) or n_bad == len(v):
        raise InvalidVoltage(f"{n_bad}/{len(v)} samples outside (0, {cfg.v_in}) V")
    r = np.empty_like(v)
    good = ~bad
    r[good] = cfg.r_bias / (cfg.v_in / v[good] - 1.0)
    if n_bad:
        idx = np.arange(len(v))
        r[bad] = np.interp(idx[bad], idx[good], r[good])
    return ChannelSeries(r, v_out.rate_hz, "ohms", v_out.t0)


def baseline_r0(r: ChannelSeries, window_s: float = 1.0) -> float:
    """Median resistance over the first ``window_s`` seconds (standing still)."""
    if not window_s > 0:
        raise ValueError("window_s must be positive")
    if window_s > r.duration_s + 1e-12:
        raise WindowTooLong(f"window {window_s} s exceeds series duration {r.duration_s} s")
    n = max(1, int(math.floor(window_s * r.rate_hz + 1e-9)))
    return float(np.median(r.values[:n]))


def resistance_to_delta(r: ChannelSeries, r0: float) -> ChannelSeries:
    """Relative resistance change (r - r0) / r0 in percent."""
    if not r0 > 0:
        raise NonPositiveBaseline(f"r0 must be positive, got {r0}")
    if r.unit != "ohms":
        raise UnitError(f"expected ohms, got {r.unit}")
    return ChannelSeries((r.values - r0) / r0 * 100.0, r.rate_hz, "percent", r.t0)


def _interp_series(s: ChannelSeries, shift_s: float, grid: np.ndarray, method: str = "cubic") -> np.ndarray:
    """Sample ``s`` (timestamps shifted by ``shift_s``) at ``grid``.

    Grid points that land on source samples are copied exactly; otherwise a
    not-a-knot cubic spline (or straight lines with ``method='linear'``) is used.
    """
    pos = (grid - (s.t0 + shift_s)) * s.rate_hz
    idx = np.rint(pos)
    if np.all(np.abs(pos - idx) < 1e-6) and idx.min() >= 0 and idx.max() < len(s):
        return s.values[idx.astype(int)].copy()
    t = s.times + shift_s
    if method == "linear" or len(s) < 4:
        return np.interp(grid, t, s.values)
    if method != "cubic":
        raise ValueError(f"method must be 'cubic' or 'linear', got {method!r}")
    return CubicSpline(t, s.values)(np.clip(grid, t[0], t[-1]))


def resample_sync(
    insole: InsoleRecording,
    grf: GrfRecording,
    target_hz: float = 100.0,
    offset_s: float = 0.0,
    *,
    speed_mps: float | tuple[float, ...] = float("nan"),
    role: str = "identification",
    r0_window_s: float = 1.0,
    name: str = "",
    method: str = "cubic",
) -> Trial:
    """Interpolate both recordings onto one uniform grid over their overlap.

    ``offset_s`` is added to the insole timestamps before alignment. The
    per-channel baseline ``r0`` is taken from the first ``r0_window_s`` of the
    synchronized insole resistances.
    """
    if insole.unit != "ohms":
        raise UnitError("convert insole voltages to ohms before synchronizing")
    if not target_hz > 0:
        raise ValueError("target_hz must be positive")
    ins_t = insole.channels["HL"].times + offset_s
    grf_t = grf.vertical.times
    start = max(ins_t[0], grf_t[0])
    end = min(ins_t[-1], grf_t[-1])
    if end - start < MIN_OVERLAP_S:
        raise InsufficientOverlap(f"overlap {max(end - start, 0.0):.3f} s < {MIN_OVERLAP_S} s")
    n = int(math.floor((end - start) * target_hz + 1e-9)) + 1
    grid = start + np.arange(n) / target_hz

    channels = {
        c: ChannelSeries(_interp_series(insole.channels[c], offset_s, grid, method), target_hz, "ohms", start)
        for c in CHANNELS
    }
    grf_out = GrfRecording(
        ChannelSeries(_interp_series(grf.vertical, 0.0, grid, method), target_hz, "newtons", start),
        ChannelSeries(_interp_series(grf.mediolateral, 0.0, grid, method), target_hz, "newtons", start),
        grf.side,
    )
    r0 = {c: baseline_r0(channels[c], r0_window_s) for c in CHANNELS}
    return Trial(InsoleRecording(channels, insole.side), grf_out, speed_mps, role, r0, name)


def estimate_offset(
    insole: InsoleRecording,
    grf: GrfRecording,
    target_hz: float = 100.0,
    max_lag_s: float = 2.0,
) -> float:
    """Insole time offset aligning the negated heel resistance with vertical GRF.

    Heel resistance drops as the vertical force rises at contact. The heel is
    only loaded in early stance, so the levels of the two signals peak at
    different times; their rising edges (positive part of the first
    difference) coincide at heel strike and are what gets cross-correlated.
    Returns the value to pass as ``offset_s`` to :func:`resample_sync`.
    """
    hl = insole.channels["HL"]
    fv = grf.vertical
    start = max(hl.t0, fv.t0)
    end = min(hl.times[-1], fv.times[-1])
    if end - start < MIN_OVERLAP_S:
        raise InsufficientOverlap("not enough overlap to estimate an offset")
    n = int(math.floor((end - start) * target_hz + 1e-9)) + 1
    grid = start + np.arange(n) / target_hz
    a = np.maximum(np.diff(-np.interp(grid, hl.times, hl.values)), 0.0)
    b = np.maximum(np.diff(np.interp(grid, fv.times, fv.values)), 0.0)
    n = len(a)
    a = (a - a.mean()) / (a.std() or 1.0)
    b = (b - b.mean()) / (b.std() or 1.0)
    max_lag = min(int(round(max_lag_s * target_hz)), n // 2)
    best_lag, best = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        # insole sample i + lag pairs with force sample i
        if lag >= 0:
            c = np.dot(a[lag:], b[: n - lag]) / (n - lag)
        else:
            c = np.dot(a[: n + lag], b[-lag:]) / (n + lag)
        if c > best:
            best, best_lag = c, lag
    return -best_lag / target_hz


# --------------------------------------------------------------------------
# files


@dataclass(frozen=True)
class TrialMeta:
    side: str
    role: str
    speed_mps: float | tuple[float, ...] = float("nan")
    adc: AdcConfig = field(default_factory=AdcConfig)
    target_hz: float = 100.0
    offset_s: float = 0.0
    auto_offset: bool = False
    r0_window_s: float = 1.0
    insole_unit: str = "volts"
    name: str = ""
    insole_file: str = ""
    grf_file: str = ""


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise SchemaError(f"missing file {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def meta_from_dict(d: Mapping, name: str = "") -> TrialMeta:
    try:
        side = d["side"]
        role = d["role"]
    except KeyError as exc:
        raise SchemaError(f"trial metadata lacks key {exc}") from exc
    if side not in SIDES:
        raise SchemaError(f"side must be one of {SIDES}, got {side!r}")
    if role not in ROLES:
        raise SchemaError(f"role must be one of {ROLES}, got {role!r}")
    speed = d.get("speed_mps", float("nan"))
    speed = tuple(float(s) for s in speed) if isinstance(speed, list) else float(speed)
    adc = d.get("adc", {})
    sync = d.get("sync", {})
    unit = d.get("insole_unit", "volts")
    if unit not in ("volts", "ohms"):
        raise UnitError(f"insole_unit must be volts or ohms, got {unit!r}")
    try:
        adc_cfg = AdcConfig(
            float(adc.get("v_in", 5.0)), float(adc.get("r_bias", 560.0)), int(adc.get("bits", 16))
        )
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    return TrialMeta(
        side=side,
        role=role,
        speed_mps=speed,
        adc=adc_cfg,
        target_hz=float(sync.get("target_hz", 100.0)),
        offset_s=float(sync.get("offset_s", 0.0)),
        auto_offset=bool(sync.get("auto_offset", False)),
        r0_window_s=float(d.get("r0_window_s", 1.0)),
        insole_unit=unit,
        name=d.get("name", name),
        insole_file=d.get("insole", ""),
        grf_file=d.get("grf", ""),
    )


def _read_csv(path: str | Path, header: Sequence[str]) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise SchemaError(f"missing file {path}") from exc
    if not text.strip():
        raise EmptyFile(f"{path} is empty")
    rows = list(csv.reader(text.splitlines()))
    got = [h.strip().lower() for h in rows[0]]
    if got != list(header):
        raise SchemaError(f"{path}: header {got} does not match {list(header)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyFile(f"{path} has a header but no samples")
    try:
        data = np.array(body, dtype=float)
    except ValueError as exc:
        raise SchemaError(f"{path}: ragged or non-numeric rows") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise SchemaError(f"{path}: expected {len(header)} columns")
    if not np.all(np.isfinite(data)):
        raise SchemaError(f"{path}: non-finite values")
    if len(data) < 2 or np.any(np.diff(data[:, 0]) <= 0):
        raise SchemaError(f"{path}: time column must be strictly increasing")
    return data


def _uniform(t: np.ndarray, cols: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Return (t0, rate, values) on a uniform grid; re-grids jittery clocks."""
    dt = np.diff(t)
    step = float(np.median(dt))
    if np.max(np.abs(dt - step)) <= 0.01 * step:
        return float(t[0]), 1.0 / step, cols
    n = int(math.floor((t[-1] - t[0]) / step + 1e-9)) + 1
    grid = t[0] + np.arange(n) * step
    return float(t[0]), 1.0 / step, np.column_stack([np.interp(grid, t, c) for c in cols.T])


def read_insole_csv(path: str | Path, side: str, unit: str = "volts") -> InsoleRecording:
    data = _read_csv(path, INSOLE_HEADER)
    t0, rate, vals = _uniform(data[:, 0], data[:, 1:])
    chans = {c: ChannelSeries(vals[:, i], rate, unit, t0) for i, c in enumerate(CHANNELS)}
    return InsoleRecording(chans, side)


def read_grf_csv(path: str | Path, side: str) -> GrfRecording:
    data = _read_csv(path, GRF_HEADER)
    t0, rate, vals = _uniform(data[:, 0], data[:, 1:])
    return GrfRecording(
        ChannelSeries(vals[:, 0], rate, "newtons", t0),
        ChannelSeries(vals[:, 1], rate, "newtons", t0),
        side,
    )


def parse_trial_csv(insole_path: str | Path, grf_path: str | Path, meta: TrialMeta) -> Trial:
    """Read one trial and condition it: volts -> ohms -> shared grid -> baseline."""
    insole = read_insole_csv(insole_path, meta.side, meta.insole_unit)
    grf = read_grf_csv(grf_path, meta.side)
    if meta.insole_unit == "volts":
        insole = InsoleRecording(
            {c: volts_to_resistance(s, meta.adc) for c, s in insole.channels.items()}, meta.side
        )
    offset = meta.offset_s
    if meta.auto_offset:
        shifted = InsoleRecording(
            {c: replace(s, t0=s.t0 + offset) for c, s in insole.channels.items()}, meta.side
        )
        offset += estimate_offset(shifted, grf, meta.target_hz)
    return resample_sync(
        insole,
        grf,
        meta.target_hz,
        offset,
        speed_mps=meta.speed_mps,
        role=meta.role,
        r0_window_s=meta.r0_window_s,
        name=meta.name,
    )


def load_trial(meta_path: str | Path) -> Trial:
    """Load a trial from its metadata file; CSV paths resolve relative to it."""
    meta_path = Path(meta_path)
    meta = meta_from_dict(load_toml(meta_path), name=meta_path.stem)
    if not meta.insole_file or not meta.grf_file:
        raise SchemaError(f"{meta_path}: metadata must name 'insole' and 'grf' files")
    base = meta_path.parent
    return parse_trial_csv(base / meta.insole_file, base / meta.grf_file, meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_insole_csv(path: str | Path, t: np.ndarray, values: np.ndarray, fmt: str = "%.9g") -> None:
    """Write a (4, N) channel matrix against timestamps ``t``."""
    arr = np.column_stack([t, np.asarray(values).T])
    np.savetxt(path, arr, fmt=fmt, delimiter=",", header=",".join(INSOLE_HEADER), comments="")


def write_grf_csv(path: str | Path, t: np.ndarray, fv: np.ndarray, fml: np.ndarray, fmt: str = "%.9g") -> None:
    arr = np.column_stack([t, fv, fml])
    np.savetxt(path, arr, fmt=fmt, delimiter=",", header=",".join(GRF_HEADER), comments="")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt(v) if math.isfinite(v) else "nan"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {type(v).__name__}")


def dump_flat_toml(d: Mapping) -> str:
    """Encode a nested dict of scalars/lists as dotted-key TOML lines."""
    lines = []

    def walk(prefix, obj):
        for k, v in obj.items():
            key = f"{prefix}{k}"
            if isinstance(v, Mapping):
                walk(key + ".", v)
            else:
                lines.append(f"{key} = {_toml_value(v)}")

    walk("", d)
    return "\n".join(lines) + "\n"


def meta_to_dict(meta: TrialMeta) -> dict:
    return {
        "name": meta.name,
        "side": meta.side,
        "role": meta.role,
        "speed_mps": list(meta.speed_mps) if isinstance(meta.speed_mps, tuple) else meta.speed_mps,
        "insole": meta.insole_file,
        "grf": meta.grf_file,
        "insole_unit": meta.insole_unit,
        "r0_window_s": meta.r0_window_s,
        "adc": {"v_in": meta.adc.v_in, "r_bias": meta.adc.r_bias, "bits": meta.adc.bits},
        "sync": {"target_hz": meta.target_hz, "offset_s": meta.offset_s, "auto_offset": meta.auto_offset},
    }

"""Piecewise-linear maps, MISO discrete LTI blocks and their compositions.

A Hammerstein-Wiener model maps the four resistance-change channels to a
force estimate through three stages::

    x_c = f1_c(dr_c)                 (static, per channel)
    v   = sum_c B_c(q) q^-nk_c / A(q) x_c   (shared-denominator LTI block)
    F   = f2(v)                      (static output map)

All filters start from zero initial conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from .dataio import CHANNELS, ChannelSeries
from .errors import SchemaError, UnstableBlock

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PwlFunction:
    """Continuous piecewise-linear map with linear end-slope extrapolation."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("breakpoint arrays must be 1-D and of equal length")
        if len(x) < 2:
            raise ValueError("a PWL function needs at least two breakpoints")
        if not np.all(np.diff(x) > 0):
            raise ValueError("breakpoints_x must be strictly increasing")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("breakpoints must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def identity(cls, x) -> PwlFunction:
        x = np.asarray(x, dtype=float)
        return cls(x, x.copy())

    @property
    def k(self) -> int:
        return len(self.x)

    def segment(self, u) -> np.ndarray:
        """Index of the segment used for each input (end segments extend)."""
        return np.clip(np.searchsorted(self.x, u, side="right") - 1, 0, len(self.x) - 2)

    def slopes(self) -> np.ndarray:
        return np.diff(self.y) / np.diff(self.x)

    def __call__(self, u):
        return pwl_eval(self, u)


def pwl_eval(f: PwlFunction, u):
    """Evaluate ``f`` at scalar or array ``u``."""
    scalar = np.ndim(u) == 0
    u = np.asarray(u, dtype=float)
    i = f.segment(u)
    x0 = f.x[i]
    y0 = f.y[i]
    slope = (f.y[i + 1] - y0) / (f.x[i + 1] - x0)
    out = y0 + slope * (u - x0)
    return float(out) if scalar else out


def pwl_basis(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Matrix ``Phi`` with ``Phi @ y == pwl_eval(PwlFunction(x, y), u)``.

    Columns are hat functions over the breakpoints, with the two outermost
    segments extrapolated linearly.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    i = np.clip(np.searchsorted(x, u, side="right") - 1, 0, len(x) - 2)
    t = (u - x[i]) / (x[i + 1] - x[i])
    phi = np.zeros((len(u), len(x)))
    rows = np.arange(len(u))
    phi[rows, i] = 1.0 - t
    phi[rows, i + 1] = t
    return phi


@dataclass(frozen=True)
class LtiBlock:
    """Multiple-input single-output rational transfer function.

    ``b`` has shape (n_inputs, n_b); ``a`` is the monic denominator
    ``[1, a_1, ..., a_na]`` shared by all inputs; ``nk`` holds one input delay
    per channel in samples.
    """

    b: np.ndarray
    a: np.ndarray
    nk: tuple[int, ...]

    def __post_init__(self):
        b = np.atleast_2d(np.array(self.b, dtype=float))
        a = np.array(self.a, dtype=float).ravel()
        nk = tuple(int(d) for d in np.broadcast_to(np.asarray(self.nk, dtype=int), (b.shape[0],)))
        if b.shape[1] < 1:
            raise ValueError("n_b must be at least 1")
        if len(a) < 1 or a[0] != 1.0:
            raise ValueError("denominator must be monic")
        if min(nk) < 0:
            raise ValueError("input delays must be non-negative")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
            raise ValueError("coefficients must be finite")
        b.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "nk", nk)

    @property
    def n_inputs(self) -> int:
        return self.b.shape[0]

    @property
    def n_b(self) -> int:
        return self.b.shape[1]

    @property
    def n_a(self) -> int:
        return len(self.a) - 1

    @property
    def warmup(self) -> int:
        """Samples affected by the zero initial conditions."""
        return max(self.n_a, self.n_b + max(self.nk))

    def poles(self) -> np.ndarray:
        return np.roots(self.a) if self.n_a else np.zeros(0, dtype=complex)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def numerator(self, c: int) -> np.ndarray:
        return np.concatenate([np.zeros(self.nk[c]), self.b[c]])

    @classmethod
    def unit_gain(cls, channel: int = 0, n_inputs: int = 4) -> LtiBlock:
        b = np.zeros((n_inputs, 1))
        b[channel, 0] = 1.0
        return cls(b, [1.0], (0,) * n_inputs)


def _as_matrix(u) -> tuple[np.ndarray, ChannelSeries | None]:
    if isinstance(u, np.ndarray):
        return np.atleast_2d(np.asarray(u, dtype=float)), None
    series = list(u)
    if series and isinstance(series[0], ChannelSeries):
        if len({len(s) for s in series}) != 1:
            raise ValueError("input channels must have equal length")
        return np.vstack([s.values for s in series]), series[0]
    return np.atleast_2d(np.asarray(series, dtype=float)), None


def _wrap(y: np.ndarray, like: ChannelSeries | None, unit: str):
    if like is None:
        return y
    return ChannelSeries(y, like.rate_hz, unit, like.t0)


def lti_filter(g: LtiBlock, u: np.ndarray) -> np.ndarray:
    """Array form of :func:`lti_apply` for a (n_inputs, N) matrix."""
    if u.shape[0] != g.n_inputs:
        raise ValueError(f"block expects {g.n_inputs} inputs, got {u.shape[0]}")
    v = np.zeros(u.shape[1])
    for c in range(g.n_inputs):
        v += lfilter(g.numerator(c), [1.0], u[c])
    return lfilter([1.0], g.a, v)


def lti_apply(g: LtiBlock, u):
    """Simulate the block from zero initial conditions.

    ``u`` is a sequence of equal-length ChannelSeries or an (n_inputs, N)
    array; the result has the same kind.
    """
    if not g.is_stable():
        raise UnstableBlock(f"denominator poles {g.poles()} not inside the unit circle")
    mat, like = _as_matrix(u)
    return _wrap(lti_filter(g, mat), like, like.unit if like is not None else "")


@dataclass(frozen=True)
class HwModel:
    f1: Mapping[str, PwlFunction]
    g: LtiBlock
    f2: PwlFunction
    norm: Mapping[str, Any] = field(default_factory=dict)
    meta: Mapping[str, Any] = field(default_factory=dict)

    kind = "hw"

    def __post_init__(self):
        if set(self.f1) != set(CHANNELS):
            raise ValueError(f"f1 needs one PWL per channel {CHANNELS}")
        if self.g.n_inputs != len(CHANNELS):
            raise ValueError("LTI block must have exactly four inputs")
        object.__setattr__(self, "f1", {c: self.f1[c] for c in CHANNELS})

    @property
    def warmup(self) -> int:
        return self.g.warmup

    @property
    def n_params(self) -> int:
        return sum(f.k for f in self.f1.values()) + self.g.b.size + self.g.n_a + self.f2.k


@dataclass(frozen=True)
class LinearModel:
    g: LtiBlock
    offset: float = 0.0
    meta: Mapping[str, Any] = field(default_factory=dict)

    kind = "linear"

    def __post_init__(self):
        if self.g.n_inputs != len(CHANNELS):
            raise ValueError("LTI block must have exactly four inputs")

    @property
    def warmup(self) -> int:
        return self.g.warmup

    @property
    def n_params(self) -> int:
        return self.g.b.size + self.g.n_a + 1


def hw_stages(m: HwModel, dr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intermediate signals (x, v, F) of the three-stage composition."""
    x = np.vstack([pwl_eval(m.f1[c], dr[i]) for i, c in enumerate(CHANNELS)])
    if not m.g.is_stable():
        raise UnstableBlock(f"denominator poles {m.g.poles()} not inside the unit circle")
    v = lti_filter(m.g, x)
    return x, v, pwl_eval(m.f2, v)


def hw_simulate(m: HwModel, dr):
    """Force estimate f2(G(f1(dr))) for four resistance-change channels."""
    mat, like = _as_matrix(dr)
    return _wrap(hw_stages(m, mat)[2], like, "newtons")


def linear_simulate(m: LinearModel, dr):
    mat, like = _as_matrix(dr)
    if not m.g.is_stable():
        raise UnstableBlock(f"denominator poles {m.g.poles()} not inside the unit circle")
    return _wrap(lti_filter(m.g, mat) + m.offset, like, "newtons")


def simulate(m: HwModel | LinearModel, dr):
    if isinstance(m, HwModel):
        return hw_simulate(m, dr)
    return linear_simulate(m, dr)


def normalize_hw(m: HwModel, dr: np.ndarray) -> tuple[HwModel, dict]:
    """Rescale each f1 output to unit standard deviation on ``dr``.

    The LTI numerators absorb the inverse scale, so the input-output map is
    unchanged. Returns the rescaled model and the scale record.
    """
    b = np.array(m.g.b)
    f1 = {}
    scales = {}
    for i, c in enumerate(CHANNELS):
        sd = float(np.std(pwl_eval(m.f1[c], dr[i])))
        if not sd > 0 or not np.isfinite(sd):
            sd = 1.0
        f1[c] = PwlFunction(m.f1[c].x, m.f1[c].y / sd)
        b[i] *= sd
        scales[c] = sd
    g = LtiBlock(b, m.g.a, m.g.nk)
    norm = {"f1_output_std": 1.0, "applied_scale": scales}
    return HwModel(f1, g, m.f2, norm, dict(m.meta)), norm


# --------------------------------------------------------------------------
# serialization


def _pwl_dict(f: PwlFunction) -> dict:
    return {"x": f.x.tolist(), "y": f.y.tolist()}


def _lti_dict(g: LtiBlock) -> dict:
    return {"b": g.b.tolist(), "a": g.a.tolist(), "nk": list(g.nk), "orders": [g.n_b, g.n_a, max(g.nk)]}


def model_to_dict(m: HwModel | LinearModel) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "kind": m.kind, "g": _lti_dict(m.g), "meta": dict(m.meta)}
    if isinstance(m, HwModel):
        d["f1"] = {c: _pwl_dict(m.f1[c]) for c in CHANNELS}
        d["f2"] = _pwl_dict(m.f2)
        d["norm"] = dict(m.norm)
    else:
        d["offset"] = float(m.offset)
    return d


def model_from_dict(d: Mapping) -> HwModel | LinearModel:
    try:
        if d["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported model schema {d['schema_version']}")
        g = LtiBlock(d["g"]["b"], d["g"]["a"], tuple(d["g"]["nk"]))
        if d["kind"] == "hw":
            f1 = {c: PwlFunction(d["f1"][c]["x"], d["f1"][c]["y"]) for c in CHANNELS}
            f2 = PwlFunction(d["f2"]["x"], d["f2"]["y"])
            return HwModel(f1, g, f2, d.get("norm", {}), d.get("meta", {}))
        if d["kind"] == "linear":
            return LinearModel(g, float(d["offset"]), d.get("meta", {}))
        raise SchemaError(f"unknown model kind {d['kind']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model file: {exc}") from exc


def serialize_model(m: HwModel | LinearModel) -> bytes:
    """Self-describing JSON; floats use shortest round-trip repr, so it is lossless."""
    return (json.dumps(model_to_dict(m), indent=1, sort_keys=True) + "\n").encode("utf-8")


def deserialize_model(data: bytes) -> HwModel | LinearModel:
    try:
        d = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(d)

"""Output-error identification of linear and Hammerstein-Wiener force models.

Linear models are initialized by equation-error least squares and refined by
Levenberg-Marquardt on the simulation error. HW models start from the linear
fit wrapped in identity nonlinearities, so the unperturbed start can only
improve on the linear cost. Breakpoint x-locations are fixed at input
quantiles; breakpoint y-values and LTI coefficients are optimized jointly.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.signal import lfilter

from .dataio import CHANNELS, Trial
from .errors import DegenerateChannel, DivergedOptimization, RankDeficientRegressor
from .metrics import FitReport, full_report, trial_events
from .model_core import (
    HwModel,
    LinearModel,
    LtiBlock,
    PwlFunction,
    lti_filter,
    normalize_hw,
    pwl_basis,
    pwl_eval,
)

MIN_IDENT_S = 10.0
STABILITY_RADIUS = 0.99
LAMBDA_MAX = 1e10


@dataclass(frozen=True)
class IdentConfig:
    breakpoint_grid: tuple[int, ...] = (5, 6, 7, 8, 9, 10)
    orders: tuple[tuple[int, int, int], ...] = ((3, 2, 0),)
    max_iters: int = 200
    tol_rel_cost: float = 1e-6
    multistarts: int = 8
    seed: int = 0
    warmup_excluded: bool = True
    lambda0: float = 1e-3
    perturb_frac: float = 0.1

    def __post_init__(self):
        grid = tuple(int(k) for k in self.breakpoint_grid)
        if not grid or min(grid) < 2 or max(grid) > 50:
            raise ValueError("breakpoint_grid must be a non-empty subset of [2, 50]")
        if self.multistarts < 1:
            raise ValueError("multistarts must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        orders = tuple(tuple(int(v) for v in o) for o in self.orders)
        for nb, na, nk in orders:
            if nb < 1 or na < 0 or nk < 0:
                raise ValueError(f"invalid orders {(nb, na, nk)}")
        object.__setattr__(self, "breakpoint_grid", tuple(sorted(set(grid))))
        object.__setattr__(self, "orders", orders)


@dataclass
class IdentResult:
    model: HwModel | LinearModel
    fit_ident: FitReport
    fit_valid: list[FitReport]
    trace: list[float]
    chosen_k: int | None
    cost: float
    candidates: list[dict] = field(default_factory=list)

    @property
    def valid_fit_mean(self) -> float:
        if not self.fit_valid:
            return math.nan
        return float(np.mean([r.nrmse_fit_pct for r in self.fit_valid]))


# --------------------------------------------------------------------------
# helpers


def _shift(x: np.ndarray, d: int) -> np.ndarray:
    if d == 0:
        return x
    out = np.zeros_like(x)
    out[d:] = x[:-d]
    return out


def stabilize(a: np.ndarray, radius: float = STABILITY_RADIUS) -> np.ndarray:
    """Move denominator roots into the disc of the given radius.

    A root z with |z| >= 1 is reflected to radius / conj(z); a root with
    radius < |z| < 1 is pulled radially onto the radius. Near-unit poles
    paired with near-cancelling zeros otherwise act as integrators that fit
    the identification record and drift on any other.
    """
    a = np.asarray(a, dtype=float)
    if len(a) <= 1:
        return a
    roots = np.roots(a)
    mag = np.abs(roots)
    if not np.any(mag > radius):
        return a
    out = mag >= 1.0
    roots[out] = radius / np.conj(roots[out])
    near = (mag > radius) & ~out
    roots[near] *= radius / mag[near]
    return np.real(np.poly(roots))


def quantile_breakpoints(u: np.ndarray, k: int) -> np.ndarray:
    """``k`` strictly increasing breakpoints at the empirical quantiles of ``u``.

    Heavily repeated values (an unloaded sensor sitting at its baseline) make
    plain quantiles coincide; the quantiles of the distinct values are used
    instead in that case.
    """
    levels = np.linspace(0.0, 1.0, k)
    q = np.quantile(u, levels)
    if np.all(np.diff(q) > 0):
        return q
    uq = np.unique(u)
    if len(uq) < 2:
        raise DegenerateChannel("input has zero variance")
    q = np.quantile(uq, levels)
    if not np.all(np.diff(q) > 0):
        q = np.linspace(uq[0], uq[-1], k)
    return q


def dataset_hash(dr: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dr, dtype=float).tobytes())
    h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return h.hexdigest()[:16]


def _warmup(order: tuple[int, int, int], cfg: IdentConfig) -> int:
    nb, na, nk = order
    return max(na, nb + nk) if cfg.warmup_excluded else 0


# --------------------------------------------------------------------------
# Levenberg-Marquardt


def levenberg_marquardt(fun, theta0, project, max_iters, tol_rel_cost, lambda0=1e-3):
    """Minimize 0.5 * ||r(theta)||^2 with multiplicative damping.

    ``fun(theta, jac)`` returns the residual vector and, if ``jac`` is true,
    its Jacobian. ``project`` maps a candidate onto the feasible set; the
    cost is evaluated after projection, so accepted steps never raise it.
    Returns (theta, cost, trace of accepted costs).
    """
    theta = project(np.asarray(theta0, dtype=float))
    r, J = fun(theta, True)
    cost = 0.5 * float(r @ r)
    if not math.isfinite(cost):
        raise DivergedOptimization("non-finite initial cost")
    trace = [cost]
    lam = lambda0
    for _ in range(max_iters):
        # Marquardt scaling: damping proportional to diag(J'J), applied
        # through column scaling so the damped system has unit diagonal
        d = np.einsum("ij,ij->j", J, J)
        sc = 1.0 / np.sqrt(np.maximum(d, 1e-12 * max(d.max(), 1e-300)))
        Js = J * sc
        H = Js.T @ Js
        g = Js.T @ r
        eye = np.eye(len(g))
        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = linalg.cho_solve(linalg.cho_factor(H + lam * eye), -g)
            except linalg.LinAlgError:
                step = np.linalg.lstsq(H + lam * eye, -g, rcond=None)[0]
            cand = project(theta + sc * step)
            r_new = fun(cand, False)[0]
            c_new = 0.5 * float(r_new @ r_new)
            if math.isfinite(c_new) and c_new < cost:
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 3.0
        if not accepted:
            break
        rel = (cost - c_new) / cost if cost > 0 else 0.0
        theta, cost = cand, c_new
        trace.append(cost)
        if rel < tol_rel_cost or cost == 0.0:
            break
        r, J = fun(theta, True)
    return theta, cost, trace


# --------------------------------------------------------------------------
# linear model


class _LinearProblem:
    """Residuals/Jacobian of y - (B/A) u - offset over non-warm-up samples."""

    def __init__(self, u: np.ndarray, y: np.ndarray, order, warm: int):
        self.u, self.y = u, y
        self.nb, self.na, self.nk = order
        self.warm = warm
        self.nu = u.shape[0]

    def unpack(self, theta):
        nb, na, nu = self.nb, self.na, self.nu
        b = theta[: nu * nb].reshape(nu, nb)
        a = np.concatenate([[1.0], theta[nu * nb: nu * nb + na]])
        return b, a, theta[-1]

    def pack(self, b, a, offset):
        return np.concatenate([np.ravel(b), np.asarray(a)[1:], [offset]])

    def project(self, theta):
        b, a, off = self.unpack(theta)
        return self.pack(b, stabilize(a), off)

    def simulate_lin(self, b, a):
        v = np.zeros(self.u.shape[1])
        pre = np.zeros(self.nk)
        for c in range(self.nu):
            v += lfilter(np.concatenate([pre, b[c]]), [1.0], self.u[c])
        return lfilter([1.0], a, v)

    def __call__(self, theta, jac):
        b, a, off = self.unpack(theta)
        yl = self.simulate_lin(b, a)
        w = self.warm
        r = (yl + off - self.y)[w:]
        if not jac:
            return r, None
        cols = []
        for c in range(self.nu):
            wc = lfilter([1.0], a, self.u[c])
            cols += [_shift(wc, self.nk + j) for j in range(self.nb)]
        z = lfilter([1.0], a, yl)
        cols += [-_shift(z, i) for i in range(1, self.na + 1)]
        cols.append(np.ones_like(yl))
        J = np.column_stack(cols)[w:]
        return r, J


def _arx_init(u: np.ndarray, y: np.ndarray, order, warm: int):
    """Equation-error least squares for (b, a); offset from the output mean."""
    nb, na, nk = order
    n = len(y)
    start = max(warm, na, nb + nk - 1)
    rows = np.arange(start, n)
    cols = []
    for c in range(u.shape[0]):
        for j in range(nb):
            cols.append(u[c, rows - nk - j])
    for i in range(1, na + 1):
        cols.append(-y[rows - i])
    cols.append(np.ones(len(rows)))
    X = np.column_stack(cols)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise RankDeficientRegressor("regressor has an all-zero column")
    Xs = X / norms
    sv = np.linalg.svd(Xs, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficientRegressor(f"regressor condition {sv[0] / max(sv[-1], 1e-300):.3g}")
    theta = np.linalg.lstsq(Xs, y[rows], rcond=None)[0] / norms
    b = theta[: u.shape[0] * nb].reshape(u.shape[0], nb)
    a = stabilize(np.concatenate([[1.0], theta[u.shape[0] * nb: u.shape[0] * nb + na]]))
    return b, a


def fit_linear_arrays(u: np.ndarray, y: np.ndarray, order, cfg: IdentConfig):
    """Identify a LinearModel on raw arrays. Returns (model, cost, trace)."""
    warm = _warmup(order, cfg)
    b, a = _arx_init(u, y, order, warm)
    prob = _LinearProblem(u, y, order, warm)
    off = float(np.mean((y - prob.simulate_lin(b, a))[warm:]))
    theta0 = prob.pack(b, a, off)
    theta, cost, trace = levenberg_marquardt(
        prob, theta0, prob.project, cfg.max_iters, cfg.tol_rel_cost, cfg.lambda0
    )
    b, a, off = prob.unpack(theta)
    model = LinearModel(LtiBlock(b, a, (order[2],) * u.shape[0]), float(off))
    return model, cost, trace


# --------------------------------------------------------------------------
# Hammerstein-Wiener model


class _HwProblem:
    """Residuals/Jacobian of the HW simulation error with fixed breakpoint x."""

    def __init__(self, u: np.ndarray, y: np.ndarray, xs1: Sequence[np.ndarray], xi: np.ndarray, order, warm: int):
        self.y = y
        self.nb, self.na, self.nk = order
        self.warm = warm
        self.xs1 = [np.asarray(x) for x in xs1]
        self.xi = np.asarray(xi)
        self.nu = u.shape[0]
        self.phi_t = [np.ascontiguousarray(pwl_basis(self.xs1[c], u[c]).T) for c in range(self.nu)]
        self.k1 = [len(x) for x in self.xs1]
        self.off1 = np.concatenate([[0], np.cumsum(self.k1)])
        self.nth1 = int(self.off1[-1])

    @property
    def size(self) -> int:
        return self.nth1 + self.nu * self.nb + self.na + len(self.xi)

    def unpack(self, theta):
        y1 = [theta[self.off1[c]: self.off1[c + 1]] for c in range(self.nu)]
        p = self.nth1
        b = theta[p: p + self.nu * self.nb].reshape(self.nu, self.nb)
        p += self.nu * self.nb
        a = np.concatenate([[1.0], theta[p: p + self.na]])
        p += self.na
        return y1, b, a, theta[p:]

    def pack(self, y1, b, a, eta):
        return np.concatenate([np.concatenate(y1), np.ravel(b), np.asarray(a)[1:], eta])

    def project(self, theta):
        y1, b, a, eta = self.unpack(theta)
        return self.pack(y1, b, stabilize(a), eta)

    def num(self, b, c):
        return np.concatenate([np.zeros(self.nk), b[c]])

    def __call__(self, theta, jac):
        y1, b, a, eta = self.unpack(theta)
        x = [y1[c] @ self.phi_t[c] for c in range(self.nu)]
        v = np.zeros(len(self.y))
        for c in range(self.nu):
            v += lfilter(self.num(b, c), [1.0], x[c])
        v = lfilter([1.0], a, v)
        w = self.warm
        if not jac:
            return (pwl_eval(PwlFunction(self.xi, eta), v) - self.y)[w:], None
        seg = np.clip(np.searchsorted(self.xi, v, side="right") - 1, 0, len(self.xi) - 2)
        t = (v - self.xi[seg]) / (self.xi[seg + 1] - self.xi[seg])
        yhat = eta[seg] + t * (eta[seg + 1] - eta[seg])
        slope = (eta[seg + 1] - eta[seg]) / (self.xi[seg + 1] - self.xi[seg])

        # rows of Jt are Jacobian columns (parameter-major, contiguous in time)
        Jt = np.empty((self.size, len(v)))
        for c in range(self.nu):
            Jt[self.off1[c]:self.off1[c + 1]] = lfilter(self.num(b, c), a, self.phi_t[c], axis=-1)
        p = self.nth1
        for c in range(self.nu):
            wc = lfilter([1.0], a, x[c])
            for j in range(self.nb):
                Jt[p] = _shift(wc, self.nk + j)
                p += 1
        if self.na:
            z = lfilter([1.0], a, v)
            for i in range(1, self.na + 1):
                Jt[p] = -_shift(z, i)
                p += 1
        Jt[:p] *= slope
        Jt[p:] = 0.0
        rows = np.arange(len(v))
        Jt[p + seg, rows] = 1.0 - t
        Jt[p + seg + 1, rows] = t
        return (yhat - self.y)[w:], Jt[:, w:].T

    def to_model(self, theta, meta=None) -> HwModel:
        y1, b, a, eta = self.unpack(theta)
        f1 = {c: PwlFunction(self.xs1[i], y1[i]) for i, c in enumerate(CHANNELS)}
        g = LtiBlock(b, a, (self.nk,) * self.nu)
        return HwModel(f1, g, PwlFunction(self.xi, eta), {}, meta or {})


def _hw_setup(u, y, k, order, lin: LinearModel, cfg: IdentConfig):
    """Breakpoints and the identity-nonlinearity start built on ``lin``."""
    for c in range(u.shape[0]):
        if not np.std(u[c]) > 0:
            raise DegenerateChannel(f"channel {CHANNELS[c]} has zero variance")
    xs1 = [quantile_breakpoints(u[c], k) for c in range(u.shape[0])]
    warm = _warmup(order, cfg)
    v_lin = lti_filter(lin.g, u)
    xi = quantile_breakpoints(v_lin, k)
    prob = _HwProblem(u, y, xs1, xi, order, warm)
    # identity f1 scaled to unit output std, numerators absorbing the scale
    sd = np.array([np.std(u[c]) for c in range(u.shape[0])])
    y1 = [xs1[c] / sd[c] for c in range(u.shape[0])]
    b = np.array(lin.g.b) * sd[:, None]
    theta0 = prob.pack(y1, b, lin.g.a, xi + lin.offset)
    return prob, theta0


def _perturb(prob: _HwProblem, theta0: np.ndarray, rng: np.random.Generator, frac: float) -> np.ndarray:
    y1, b, a, eta = prob.unpack(theta0.copy())
    y1 = [y + rng.normal(0.0, frac * (y.max() - y.min()), len(y)) for y in y1]
    eta = eta + rng.normal(0.0, frac * (eta.max() - eta.min()), len(eta))
    return prob.pack(y1, b, a, eta)


def _start_rng(seed: int, k: int, order, start: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(k), *[int(o) for o in order], int(start)])


def run_hw_start(u, y, k, order, lin: LinearModel, cfg: IdentConfig, start: int):
    """One multistart of the HW fit. Start 0 is the unperturbed linear start."""
    prob, theta0 = _hw_setup(u, y, k, order, lin, cfg)
    if start > 0:
        theta0 = _perturb(prob, theta0, _start_rng(cfg.seed, k, order, start), cfg.perturb_frac)
    try:
        theta, cost, trace = levenberg_marquardt(
            prob, theta0, prob.project, cfg.max_iters, cfg.tol_rel_cost, cfg.lambda0
        )
    except DivergedOptimization:
        return math.inf, None, []
    return cost, theta, trace


def _run_task(args):
    u, y, k, order, lin, cfg, start = args
    return run_hw_start(u, y, k, order, lin, cfg, start)


def _map(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def _best_start(results) -> int:
    """Lowest cost; ties resolved by start index."""
    return min(range(len(results)), key=lambda s: (results[s][0], s))


def _finish_hw(prob, theta, u, meta) -> HwModel:
    model = prob.to_model(theta, meta)
    model, norm = normalize_hw(model, u)
    return HwModel(model.f1, model.g, model.f2, norm, meta)


# --------------------------------------------------------------------------
# public API


def _arrays(trial: Trial, component: str) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(trial.dr), np.asarray(trial.target(component))


def _check_duration(trial: Trial):
    if len(trial) / trial.rate_hz < MIN_IDENT_S:
        raise ValueError(f"identification trial must last at least {MIN_IDENT_S} s")


def _meta(trial: Trial, component: str, cfg: IdentConfig, kind: str, order, k=None, start=None) -> dict:
    u, y = _arrays(trial, component)
    meta = {
        "kind": kind,
        "component": component,
        "side": trial.side,
        "orders": list(order),
        "seed": cfg.seed,
        "dataset_hash": dataset_hash(u, y),
        "rate_hz": trial.rate_hz,
    }
    if k is not None:
        meta["breakpoints"] = k
    if start is not None:
        meta["start"] = start
    return meta


def _reports(model, ident: Trial, valid: Sequence[Trial]):
    return full_report(ident, model), [full_report(t, model) for t in valid]


def identify_linear(
    ident: Trial,
    cfg: IdentConfig = IdentConfig(),
    component: str = "vertical",
    order: tuple[int, int, int] | None = None,
    valid: Sequence[Trial] = (),
) -> IdentResult:
    """Output-error linear model (LTI block plus constant offset)."""
    _check_duration(ident)
    order = tuple(order or cfg.orders[0])
    u, y = _arrays(ident, component)
    model, cost, trace = fit_linear_arrays(u, y, order, cfg)
    model = LinearModel(model.g, model.offset, _meta(ident, component, cfg, "linear", order))
    fi, fv = _reports(model, ident, valid)
    return IdentResult(model, fi, fv, trace, None, cost)


def identify_hw(
    ident: Trial,
    k: int,
    cfg: IdentConfig = IdentConfig(),
    component: str = "vertical",
    order: tuple[int, int, int] | None = None,
    linear: LinearModel | None = None,
    valid: Sequence[Trial] = (),
    jobs: int = 1,
) -> IdentResult:
    """Hammerstein-Wiener model with ``k`` breakpoints per nonlinearity."""
    if k not in cfg.breakpoint_grid:
        raise ValueError(f"k = {k} is not in the breakpoint grid {cfg.breakpoint_grid}")
    _check_duration(ident)
    order = tuple(order or cfg.orders[0])
    u, y = _arrays(ident, component)
    if linear is None:
        linear = fit_linear_arrays(u, y, order, cfg)[0]
    tasks = [(u, y, k, order, linear, cfg, s) for s in range(cfg.multistarts)]
    results = _map(tasks, jobs)
    return _hw_result(ident, component, cfg, order, k, linear, results, u, y, valid)


def _hw_result(ident, component, cfg, order, k, linear, results, u, y, valid) -> IdentResult:
    if all(r[1] is None for r in results):
        raise DivergedOptimization(f"all {len(results)} multistarts diverged for k = {k}")
    s = _best_start(results)
    cost, theta, trace = results[s]
    prob, _ = _hw_setup(u, y, k, order, linear, cfg)
    model = _finish_hw(prob, theta, u, _meta(ident, component, cfg, "hw", order, k, s))
    fi, fv = _reports(model, ident, valid)
    return IdentResult(model, fi, fv, list(trace), k, cost)


def _candidate_row(res: IdentResult, order) -> dict:
    return {
        "kind": res.model.kind,
        "k": res.chosen_k,
        "orders": list(order),
        "n_params": res.model.n_params,
        "cost": res.cost,
        "fit_ident": res.fit_ident.nrmse_fit_pct,
        "fit_valid_mean": res.valid_fit_mean,
        "start": res.model.meta.get("start"),
    }


def selection_key(res: IdentResult) -> tuple:
    """Sort key for candidates: highest mean validation fit, then fewest parameters."""
    fit = res.valid_fit_mean
    fit = -math.inf if not math.isfinite(fit) else round(fit, 9)
    return (-fit, res.model.n_params, res.chosen_k or 0)


def grid_search(
    ident: Trial,
    valid: Sequence[Trial],
    cfg: IdentConfig = IdentConfig(),
    component: str = "vertical",
    jobs: int = 1,
    return_all: bool = False,
):
    """Fit the linear model and one HW model per breakpoint count; keep the best.

    Selection maximizes the mean validation NRMSE fit; ties go to the model
    with fewer parameters. All (k, start) fits are independent tasks and are
    reduced in a fixed order, so ``jobs`` does not change the result.
    With ``return_all`` the function also returns every candidate result.
    """
    if not valid:
        raise ValueError("grid_search needs at least one validation trial")
    _check_duration(ident)
    u, y = _arrays(ident, component)
    linears = {}
    candidates: list[tuple[IdentResult, tuple]] = []
    for order in cfg.orders:
        lin, cost, trace = fit_linear_arrays(u, y, order, cfg)
        lin = LinearModel(lin.g, lin.offset, _meta(ident, component, cfg, "linear", order))
        linears[order] = lin
        fi, fv = _reports(lin, ident, valid)
        candidates.append((IdentResult(lin, fi, fv, trace, None, cost), order))

    keys = [(order, k) for order in cfg.orders for k in cfg.breakpoint_grid]
    tasks = [
        (u, y, k, order, linears[order], cfg, s) for order, k in keys for s in range(cfg.multistarts)
    ]
    flat = _map(tasks, jobs)
    m = cfg.multistarts
    for i, (order, k) in enumerate(keys):
        res = _hw_result(ident, component, cfg, order, k, linears[order], flat[i * m:(i + 1) * m], u, y, valid)
        candidates.append((res, order))

    best, _ = min(candidates, key=lambda item: selection_key(item[0]))
    best.candidates = [_candidate_row(r, o) for r, o in candidates]
    if return_all:
        return best, [r for r, _ in candidates]
    return best


def hw_jacobian_check(prob: _HwProblem, theta: np.ndarray, h_rel: float = 1e-6) -> np.ndarray:
    """Per-column relative error of the analytic Jacobian vs central differences."""
    _, J = prob(theta, True)
    errs = np.empty(len(theta))
    for j in range(len(theta)):
        h = h_rel * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (prob(tp, False)[0] - prob(tm, False)[0]) / (2 * h)
        den = max(np.linalg.norm(fd), 1e-12)
        errs[j] = np.linalg.norm(J[:, j] - fd) / den
    return errs


def hw_problem(u, y, xs1, xi, order=(3, 2, 0), warm=None) -> _HwProblem:
    """Residual/Jacobian evaluator for an HW fit with fixed breakpoints."""
    if warm is None:
        warm = max(order[1], order[0] + order[2])
    return _HwProblem(np.asarray(u, float), np.asarray(y, float), xs1, xi, tuple(order), warm)


def linear_problem(u, y, order=(3, 2, 0), warm=None) -> _LinearProblem:
    if warm is None:
        warm = max(order[1], order[0] + order[2])
    return _LinearProblem(np.asarray(u, float), np.asarray(y, float), tuple(order), warm)

"""Command-line surface: simulate, ident, validate, gait and report.

Every command computes all of its outputs in memory first and only then
writes them, together with a ``manifest.json``, into ``--out``. A failing
command therefore leaves no partial results behind.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import re
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__, gait
from .dataio import (
    CHANNELS,
    COMPONENTS,
    SIDES,
    AdcConfig,
    TrialMeta,
    divider_voltage,
    dump_flat_toml,
    load_toml,
    load_trial,
    meta_to_dict,
)
from .errors import DegenerateData, InsoleError, SchemaError
from .ident import IdentConfig, IdentResult, grid_search, selection_key
from .metrics import FIT_FIELDS, full_report
from .model_core import deserialize_model, model_to_dict, serialize_model, simulate
from .sim import SimConfig, make_truth_hw, truth_trial
from .svgplot import Figure, Panel

U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class GaitConfig:
    threshold_frac: float = 0.05
    min_cycle_s: float = 0.4
    activation_frac: float = 0.2
    stance_frac: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    ident: IdentConfig = IdentConfig()
    sim: SimConfig = SimConfig()
    gait: GaitConfig = GaitConfig()
    components: tuple[str, ...] = COMPONENTS

    def snapshot(self) -> dict:
        ident = asdict(self.ident)
        ident["components"] = list(self.components)
        return {"ident": ident, "sim": asdict(self.sim), "gait": asdict(self.gait)}


def _build(cls, table: Mapping, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise SchemaError(f"unknown [{section}] keys: {', '.join(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"[{section}]: {exc}") from exc


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    """Read the ``[ident]``, ``[sim]`` and ``[gait]`` tables; ``seed`` overrides both seeds."""
    raw = load_toml(path) if path else {}
    extra = sorted(set(raw) - {"ident", "sim", "gait"})
    if extra:
        raise SchemaError(f"unknown config tables: {', '.join(extra)}")
    ident_tab = dict(raw.get("ident", {}))
    components = tuple(ident_tab.pop("components", COMPONENTS))
    if not components or any(c not in COMPONENTS for c in components):
        raise SchemaError(f"ident.components must be drawn from {COMPONENTS}")
    cfg = RunConfig(
        _build(IdentConfig, ident_tab, "ident"),
        _build(SimConfig, raw.get("sim", {}), "sim"),
        _build(GaitConfig, raw.get("gait", {}), "gait"),
        components,
    )
    if seed is not None:
        if not 0 <= seed <= U64_MAX:
            raise SchemaError("--seed must fit in an unsigned 64-bit integer")
        cfg = replace(cfg, ident=replace(cfg.ident, seed=seed), sim=replace(cfg.sim, seed=seed))
    return cfg


# --------------------------------------------------------------------------
# output staging


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name).lstrip(".") or "unnamed"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Outputs:
    """Files staged in memory until the command has fully succeeded."""

    def __init__(self, deterministic: bool):
        self.deterministic = deterministic
        self.files: dict[str, bytes] = {}
        self.inputs: dict[str, str] = {}

    def add(self, name: str, data: str | bytes) -> None:
        if name in self.files:
            raise RuntimeError(f"duplicate output {name}")
        self.files[name] = data.encode("utf-8") if isinstance(data, str) else data

    def table(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        self.add(name, buf.getvalue())

    def svg(self, name: str, fig: Figure) -> None:
        self.add(name, fig.to_svg(None if self.deterministic else _timestamp()))

    def hash_input(self, path: str | Path) -> None:
        p = Path(path)
        try:
            self.inputs[str(p)] = _sha256(p.read_bytes())
        except FileNotFoundError as exc:
            raise SchemaError(f"missing file {p}") from exc

    def hash_trial(self, meta_path: str | Path) -> None:
        meta_path = Path(meta_path)
        self.hash_input(meta_path)
        d = load_toml(meta_path)
        for key in ("insole", "grf"):
            if key in d:
                self.hash_input(meta_path.parent / d[key])

    def commit(self, out_dir: str | Path, command: str, cfg: Mapping | None, seed) -> Path:
        out = Path(out_dir)
        manifest = {
            "tool": "insolegrf",
            "version": __version__,
            "command": command,
            "seed": seed,
            "config": cfg,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {k: _sha256(v) for k, v in sorted(self.files.items())},
            "created": None if self.deterministic else _timestamp(),
        }
        self.add("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        root = out.resolve()
        targets = []
        for name, data in sorted(self.files.items()):
            target = (out / name).resolve()
            if root not in target.parents:
                raise SchemaError(f"refusing to write {name} outside {out}")
            targets.append((target, data))
        for target, data in targets:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        return out


def _unique(names: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for n in names:
        n = _safe(n)
        if n in seen:
            seen[n] += 1
            n = f"{n}_{seen[n]}"
        else:
            seen[n] = 0
        out.append(n)
    return out


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: RunConfig, out_dir, deterministic: bool = False) -> Path:
    """Synthesize the walking protocol as volt/force CSVs plus a truth sidecar."""
    sim = cfg.sim
    out = Outputs(deterministic)
    dataset = sim.dataset()
    truth_model = None
    if sim.truth_k:
        truth_model = make_truth_hw(sim.truth_k, sim.seed, dataset[0][0].dr)
    adc = AdcConfig()
    sidecar = {"trials": {}, "truth_model": model_to_dict(truth_model) if truth_model else None}
    for i, (trial, truth) in enumerate(dataset):
        if truth_model is not None:
            trial = truth_trial(truth_model, trial, sim.truth_noise, seed=[sim.seed, i], component="vertical")
        name = _safe(trial.name)
        t = trial.insole.channels[CHANNELS[0]].times
        volts = []
        for c in CHANNELS:
            v = divider_voltage(trial.insole.channels[c], adc).values
            volts.append(np.round(v / adc.lsb) * adc.lsb)
        out.table(f"{name}_insole.csv", ["t", "hl", "mf", "mt", "to"],
                  zip(t, *volts))
        out.table(f"{name}_grf.csv", ["t", "fv", "fml"],
                  zip(t, trial.grf.vertical.values, trial.grf.mediolateral.values))
        n = len(t)
        forces = truth["channel_forces"][:, :n]
        out.table(f"{name}_truth_forces.csv", ["t", "hl", "mf", "mt", "to"], zip(t, *forces))
        meta = TrialMeta(
            side=trial.side, role=trial.role, speed_mps=trial.speed_mps, adc=adc,
            target_hz=sim.rate_hz, name=trial.name,
            insole_file=f"{name}_insole.csv", grf_file=f"{name}_grf.csv",
        )
        out.add(f"{name}.toml", dump_flat_toml(meta_to_dict(meta)))
        sidecar["trials"][trial.name] = {
            "side": trial.side,
            "role": trial.role,
            "speeds_mps": list(sim.speeds),
            "heel_strike_times": [float(x) for x in truth["heel_strike_times"]],
            "heel_strike_indices": [int(x) for x in truth["heel_strike_indices"]],
            "periods": [float(x) for x in truth["periods"]],
            "channel_forces_file": f"{name}_truth_forces.csv",
        }
    out.add("truth.json", json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return out.commit(out_dir, "simulate", cfg.snapshot(), sim.seed)


# --------------------------------------------------------------------------
# ident


FIT_HEADER = ["side", "component", "model_type", "selected", "k", "dataset", "role", *FIT_FIELDS]
CANDIDATE_HEADER = ["side", "component", "kind", "k", "orders", "n_params", "cost",
                    "fit_ident", "fit_valid_mean", "start", "selected"]


def _fit_rows(side, comp, kind, selected, res: IdentResult, ident, valid):
    pairs = [(ident, res.fit_ident)] + list(zip(valid, res.fit_valid))
    for trial, rep in pairs:
        d = rep.as_dict()
        yield [side, comp, kind, selected, res.chosen_k, trial.name, trial.role, *[d[f] for f in FIT_FIELDS]]


def cmd_ident(ident_paths: Sequence, valid_paths: Sequence, cfg: RunConfig, out_dir,
              jobs: int = 1, deterministic: bool = False) -> Path:
    """Grid-search linear and HW models per foot and force component."""
    out = Outputs(deterministic)
    for p in [*ident_paths, *valid_paths]:
        out.hash_trial(p)
    idents = [load_trial(p) for p in ident_paths]
    valids = [load_trial(p) for p in valid_paths]
    sides = [s for s in SIDES if any(t.side == s for t in idents)]
    if not sides:
        raise SchemaError("no identification trials given")
    fit_rows, cand_rows = [], []
    for side in sides:
        it = [t for t in idents if t.side == side]
        if len(it) > 1:
            raise SchemaError(f"expected one identification trial for the {side} foot, got {len(it)}")
        vt = [t for t in valids if t.side == side]
        if not vt:
            raise SchemaError(f"no validation trials for the {side} foot")
        for comp in cfg.components:
            best, results = grid_search(it[0], vt, cfg.ident, comp, jobs=jobs, return_all=True)
            lin = min((r for r in results if r.model.kind == "linear"), key=selection_key)
            hw = min((r for r in results if r.model.kind == "hw"), key=selection_key)
            stem = f"models/{side}_{comp}"
            out.add(f"{stem}.json", serialize_model(best.model))
            out.add(f"{stem}_linear.json", serialize_model(lin.model))
            out.add(f"{stem}_hw.json", serialize_model(hw.model))
            for kind, res in (("linear", lin), ("hw", hw)):
                fit_rows += _fit_rows(side, comp, kind, res is best, res, it[0], vt)
            for res, row in zip(results, best.candidates):
                cand_rows.append([side, comp, row["kind"], row["k"], " ".join(map(str, row["orders"])),
                                  row["n_params"], row["cost"], row["fit_ident"], row["fit_valid_mean"],
                                  row["start"], res is best])
    out.table("fit_report.csv", FIT_HEADER, fit_rows)
    out.table("candidates.csv", CANDIDATE_HEADER, cand_rows)
    return out.commit(out_dir, "ident", cfg.snapshot(), cfg.ident.seed)


# --------------------------------------------------------------------------
# validate


def _decimate(x: np.ndarray, y: np.ndarray, max_points: int = 2000):
    step = max(1, int(math.ceil(len(x) / max_points)))
    return x[::step], y[::step]


def _overlay(trial, comp, f, fhat, warmup) -> Figure:
    t = np.arange(len(f)) / trial.rate_hz
    full = Panel(f"{trial.name}: {comp} GRF, whole trial", "time (s)", "force (N)")
    full.add(*_decimate(t, f), label="measured")
    full.add(*_decimate(t[warmup:], fhat[warmup:]), label="estimated", dashed=True)
    mid = len(f) // 2
    span = int(5 * trial.rate_hz)
    sl = slice(max(warmup, mid - span), min(len(f), mid + span))
    zoom = Panel("10 s window", "time (s)", "force (N)")
    zoom.add(t[sl], f[sl], label="measured")
    zoom.add(t[sl], fhat[sl], label="estimated", dashed=True)
    return Figure([full, zoom])


VALIDATE_HEADER = ["side", "component", "model_type", "selected", "k", "dataset", "role", *FIT_FIELDS]


def cmd_validate(model_path, trial_paths: Sequence, cfg: RunConfig, out_dir, deterministic: bool = False) -> Path:
    """Score a saved model on trials and draw measured-vs-estimated overlays."""
    out = Outputs(deterministic)
    out.hash_input(model_path)
    for p in trial_paths:
        out.hash_trial(p)
    try:
        model = deserialize_model(Path(model_path).read_bytes())
    except FileNotFoundError as exc:
        raise SchemaError(f"missing file {model_path}") from exc
    trials = [load_trial(p) for p in trial_paths]
    comp = model.meta.get("component", "vertical")
    side = model.meta.get("side", "")
    rows = []
    for trial, stem in zip(trials, _unique([t.name for t in trials])):
        rep = full_report(trial, model, component=comp).as_dict()
        rows.append([side or trial.side, comp, model.kind, True, model.meta.get("breakpoints"),
                     trial.name, trial.role, *[rep[f] for f in FIT_FIELDS]])
        fhat = simulate(model, trial.dr)
        out.svg(f"overlay_{stem}.svg", _overlay(trial, comp, trial.target(comp), fhat, model.warmup))
    out.table("fit_report.csv", VALIDATE_HEADER, rows)
    return out.commit(out_dir, "validate", cfg.snapshot(), None)


# --------------------------------------------------------------------------
# gait


def cmd_gait(trial_path, cfg: RunConfig, out_dir, deterministic: bool = False) -> Path:
    """Cycle-normalize forces and resistance changes and label stance phases."""
    g = cfg.gait
    out = Outputs(deterministic)
    out.hash_trial(trial_path)
    trial = load_trial(trial_path)
    try:
        events = gait.detect_heel_strikes(trial.grf.vertical, g.threshold_frac, g.min_cycle_s)
        source = "grf"
    except DegenerateData:
        events = gait.detect_heel_strikes_from_sensor(
            trial.dr[0], threshold_frac=g.threshold_frac, min_cycle_s=g.min_cycle_s, rate_hz=trial.rate_hz
        )
        source = "sensor"
    signals = {"fv": trial.grf.vertical.values, "fml": trial.grf.mediolateral.values}
    signals.update({f"dr_{c}": trial.dr[i] for i, c in enumerate(CHANNELS)})
    segs = {k: gait.segment_cycles(v, events) for k, v in signals.items()}
    stats = {k: gait.cycle_stats(s) for k, s in segs.items()}
    timeline = gait.classify_phases(
        {c: stats[f"dr_{c}"] for c in CHANNELS}, stats["fv"], g.activation_frac, g.stance_frac
    )

    out.table("events.csv", ["index", "time_s", "source"],
              ([int(i), i / trial.rate_hz, source] for i in events))
    cyc_rows = []
    for k, s in segs.items():
        for cid, row in zip(s.cycle_ids, s.cycles):
            cyc_rows += [[k, int(cid), p, v] for p, v in zip(gait.PCT, row)]
    out.table("cycles.csv", ["signal", "cycle_id", "pct", "value"], cyc_rows)
    st_rows = []
    for k, s in stats.items():
        st_rows += [[k, p, m, sd, s.n] for p, m, sd in zip(gait.PCT, s.mean, s.std)]
    out.table("stats.csv", ["signal", "pct", "mean", "std", "n"], st_rows)
    out.table("excluded_cycles.csv", ["cycle_id", "reason"], segs["fv"].excluded_cycles)
    out.table(
        "phases.csv", ["pct", "label", *[f"active_{c}" for c in CHANNELS]],
        ([p, lab, *[bool(timeline.active[c][i]) for c in CHANNELS]]
         for i, (p, lab) in enumerate(zip(gait.PCT, timeline.labels))),
    )
    out.table(
        "phase_order.csv", ["channel", "onset_pct", "release_pct", "ordering_consistent"],
        ([c, timeline.onsets[c], timeline.releases[c], timeline.ordering_consistent] for c in CHANNELS),
    )

    forces = Panel("Ground reaction force (mean +/- 1 SD)", "gait cycle (%)", "force (N)")
    for key, label, scale in (("fv", "vertical", 1.0), ("fml", "mediolateral (x10)", 10.0)):
        s = stats[key]
        forces.add(gait.PCT, scale * s.mean, label=label,
                   band=(scale * (s.mean - s.std), scale * (s.mean + s.std)))
    dr = Panel("Resistance change (mean +/- 1 SD)", "gait cycle (%)", "dR (%)")
    for c in CHANNELS:
        s = stats[f"dr_{c}"]
        dr.add(gait.PCT, s.mean, label=c, band=(s.mean - s.std, s.mean + s.std))
    phases = Panel("Gait phases", "gait cycle (%)", categories=(gait.PCT, list(timeline.labels)))
    out.svg("gait.svg", Figure([forces, dr, phases]))
    return out.commit(out_dir, "gait", cfg.snapshot(), None)


# --------------------------------------------------------------------------
# report


REPORT_HEADER = [
    "run", "side", "component", "model_type", "k", "nrmse_fit_ident_pct", "nrmse_fit_valid_pct",
    "r_squared", "r_squared_timeseries", "rmse_abs", "rmse_abs_cycles", "rmse_norm_pct",
    "rmse_norm_rounded_pct", "norm_mode", "n_valid",
]
NORM_MODE = {"vertical": "max", "mediolateral": "range"}


def _num(s: str) -> float:
    return float(s) if s not in ("", None) else math.nan


def _mean(rows, key) -> float:
    vals = [_num(r[key]) for r in rows]
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


def _read_fit_report(run_dir: Path, out: Outputs) -> list[dict]:
    path = run_dir / "fit_report.csv"
    out.hash_input(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    need = {"side", "component", "model_type", "role", "nrmse_fit_pct"}
    if not rows or not need <= set(rows[0]):
        raise SchemaError(f"{path} is not a fit report")
    return rows


def _summary_rows(run: str, rows: list[dict]) -> list[list]:
    if "selected" in rows[0]:
        rows = [r for r in rows if r["selected"] == "1"]
    out = []
    for side in SIDES:
        for comp in COMPONENTS:
            grp = [r for r in rows if r["side"] == side and r["component"] == comp]
            if not grp:
                continue
            ident = [r for r in grp if r["role"] == "identification"]
            valid = [r for r in grp if r["role"] == "validation"] or grp
            mode = NORM_MODE[comp]
            norm = _mean(valid, f"rmse_norm_{mode}_pct")
            out.append([
                run, side, comp, grp[0]["model_type"], grp[0]["k"],
                _mean(ident, "nrmse_fit_pct"), _mean(valid, "nrmse_fit_pct"),
                _mean(valid, "r_squared"), _mean(valid, "r_squared_timeseries"),
                _mean(valid, "rmse_abs"), _mean(valid, "rmse_abs_cycles"),
                norm, round(norm) if math.isfinite(norm) else math.nan, mode, len(valid),
            ])
    return out


def _pair(rows, col, fmt) -> str:
    parts = []
    for comp in COMPONENTS:
        vals = [r[REPORT_HEADER.index(col)] for r in rows if r[2] == comp]
        vals = [v for v in vals if isinstance(v, str) or math.isfinite(v)]
        if not vals:
            parts.append("n/a")
        elif isinstance(vals[0], str):
            parts.append("/".join(vals))
        else:
            parts.append(format(float(np.mean(vals)), fmt))
    return "; ".join(parts)


def cmd_report(run_dirs: Sequence, cfg: RunConfig, out_dir, deterministic: bool = False) -> Path:
    """Consolidate fit reports of several runs into a comparison table."""
    out = Outputs(deterministic)
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise SchemaError("report needs at least one run directory")
    runs = _unique([d.resolve().name for d in dirs])
    rows, per_run = [], {}
    for run, d in zip(runs, dirs):
        r = _summary_rows(run, _read_fit_report(d, out))
        per_run[run] = r
        rows += r
    out.table("report.csv", REPORT_HEADER, rows)
    table = [
        ["No. sensors"] + [len(CHANNELS)] * len(runs),
        ["Principle"] + ["piezoresistive"] * len(runs),
        ["Model (V; ML)"] + [_pair(per_run[r], "model_type", "") for r in runs],
        ["R2 (V; ML)"] + [_pair(per_run[r], "r_squared", ".2f") for r in runs],
        ["Absolute RMSE (V; ML) [N]"] + [_pair(per_run[r], "rmse_abs", ".2f") for r in runs],
        ["Rounded RMSE (V; ML) [%]"] + [_pair(per_run[r], "rmse_norm_rounded_pct", ".0f") for r in runs],
        ["NRMSE fit validation (V; ML) [%]"] + [_pair(per_run[r], "nrmse_fit_valid_pct", ".1f") for r in runs],
    ]
    out.table("table1.csv", ["metric", *runs], table)
    return out.commit(out_dir, "report", cfg.snapshot(), None)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [ident], [sim] and [gait] tables")
    common.add_argument("--seed", type=int, help="overrides ident.seed and sim.seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for identification")
    common.add_argument("--deterministic", action="store_true", help="suppress timestamps in outputs")

    p = argparse.ArgumentParser(prog="insolegrf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic walking dataset")
    s = sub.add_parser("ident", parents=[common], help="identify linear and HW models")
    s.add_argument("--ident", nargs="+", required=True, metavar="TRIAL_TOML")
    s.add_argument("--valid", nargs="+", required=True, metavar="TRIAL_TOML")
    s = sub.add_parser("validate", parents=[common], help="score a saved model on trials")
    s.add_argument("model")
    s.add_argument("trials", nargs="+", metavar="TRIAL_TOML")
    s = sub.add_parser("gait", parents=[common], help="gait-cycle statistics and phases")
    s.add_argument("trial", metavar="TRIAL_TOML")
    s = sub.add_parser("report", parents=[common], help="summary table comparing runs")
    s.add_argument("runs", nargs="+", metavar="RUN_DIR")
    return p


def run(args: argparse.Namespace) -> None:
    if args.jobs < 1:
        raise SchemaError("--jobs must be >= 1")
    cfg = load_config(args.config, args.seed)
    det = args.deterministic
    if args.command == "simulate":
        cmd_simulate(cfg, args.out, det)
    elif args.command == "ident":
        cmd_ident(args.ident, args.valid, cfg, args.out, args.jobs, det)
    elif args.command == "validate":
        cmd_validate(args.model, args.trials, cfg, args.out, det)
    elif args.command == "gait":
        cmd_gait(args.trial, cfg, args.out, det)
    elif args.command == "report":
        cmd_report(args.runs, cfg, args.out, det)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except InsoleError as exc:
        print(f"insolegrf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"insolegrf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

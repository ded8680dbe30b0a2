"""Run the full walking protocol end to end through the CLI commands.

Simulates three trials per foot at 1, 1.5 and 2 m/s, identifies linear and
HW models on trial 1, validates on trials 2 and 3, runs the gait analysis on
the identification trial and writes the summary table.

    python scripts/run_protocol.py --out runs/protocol --seed 2024
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from insolegrf.cli import cmd_gait, cmd_ident, cmd_report, cmd_simulate, cmd_validate, load_config

SIDES = ("left", "right")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--config", help="TOML config; defaults reproduce the full protocol")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    cfg = load_config(args.config, args.seed)
    out = args.out
    t0 = time.perf_counter()

    sim = cmd_simulate(cfg, out / "sim", deterministic=True)
    n = cfg.sim.trial_count
    print(f"simulated {n} trials per foot in {time.perf_counter() - t0:.0f} s")

    ids = cmd_ident(
        [sim / f"trial1_{s}.toml" for s in SIDES],
        [sim / f"trial{i}_{s}.toml" for s in SIDES for i in range(2, n + 1)],
        cfg, out / "ident", jobs=args.jobs, deterministic=True,
    )
    print(f"identified models in {time.perf_counter() - t0:.0f} s")

    for s in SIDES:
        for comp in cfg.components:
            cmd_validate(ids / "models" / f"{s}_{comp}.json",
                         [sim / f"trial{i}_{s}.toml" for i in range(2, n + 1)],
                         cfg, out / "valid" / f"{s}_{comp}", deterministic=True)
        cmd_gait(sim / f"trial1_{s}.toml", cfg, out / "gait" / s, deterministic=True)

    rep = cmd_report([ids], cfg, out / "report", deterministic=True)
    print(f"done in {time.perf_counter() - t0:.0f} s\n")
    with open(rep / "table1.csv", newline="") as fh:
        for row in csv.reader(fh):
            print("  " + " | ".join(row))
    return 0


if __name__ == "__main__":
    sys.exit(main())

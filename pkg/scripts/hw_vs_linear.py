"""Compare HW and linear validation fits under the saturating and linearized sensor laws.

With the saturating law the resistance change flattens at high load, which a
linear model cannot follow; with the law linearized the two model classes
should land close together.

    python scripts/hw_vs_linear.py --seeds 1 2
"""

import argparse
import sys
import time

from insolegrf import ident
from insolegrf.ident import IdentConfig
from insolegrf.sim import SensorLaw, linearized_law, synth_dataset


def gap(law: SensorLaw, seed: int, cfg: IdentConfig, component: str):
    data = synth_dataset(law=law, seed=seed, sides=("left",))
    tr, va = data[0][0], [d[0] for d in data[1:]]
    best, everything = ident.grid_search(tr, va, cfg, component=component, return_all=True)
    lin = next(r for r in everything if r.chosen_k is None)
    hw = max((r for r in everything if r.chosen_k is not None), key=lambda r: r.valid_fit_mean)
    return lin.valid_fit_mean, hw.valid_fit_mean, hw.chosen_k


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--component", default="vertical", choices=("vertical", "mediolateral"))
    ap.add_argument("--multistarts", type=int, default=8)
    args = ap.parse_args(argv)
    cfg = IdentConfig(multistarts=args.multistarts)

    print(f"{'law':<12}{'seed':>5}{'linear %':>10}{'HW %':>9}{'k':>4}{'gap':>8}{'time s':>8}")
    for name, law in (("saturating", SensorLaw()), ("linearized", linearized_law(SensorLaw()))):
        for seed in args.seeds:
            t0 = time.perf_counter()
            lin, hw, k = gap(law, seed, cfg, args.component)
            print(f"{name:<12}{seed:>5}{lin:>10.2f}{hw:>9.2f}{k:>4}{hw - lin:>8.2f}{time.perf_counter() - t0:>8.0f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Recovery probability over a grid of sampling rates, plus a heavily corrupted cell."""
import argparse
from pathlib import Path

from robustmc.bench import ExperimentGrid, run_phase_transition, save_phase
from robustmc.datagen import InstanceSpec


def build_grids(m=400, rank=5, trials=10, time_limit=20.0):
    common = dict(trials=trials, time_limit=time_limit, seed=11, solver={"step_scale": 0.85}, eta_factor=2.0)
    p_values = tuple(round(0.02 + 0.04 * i, 2) for i in range(8))
    sweep = ExperimentGrid(InstanceSpec(m, m, rank, condition_number=2.0, corruption_row_col_fraction=0.01),
                           p_values=p_values, **common)
    heavy = ExperimentGrid(InstanceSpec(m, m, rank, condition_number=2.0, corruption_row_col_fraction=0.2),
                           p_values=(0.3,), **common)
    return {"sweep": sweep, "heavy_corruption": heavy}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, default=400)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/phase")
    args = ap.parse_args(argv)
    for name, grid in build_grids(args.m, trials=args.trials).items():
        cells, trials = run_phase_transition(grid, workers=args.jobs)
        save_phase(Path(args.out) / name, grid, cells, trials, timings=True)
        for c in cells:
            print(f"{name}: p={c.p:.2f} rho={c.rho:.2f} success {c.successes}/{c.trials}")


if __name__ == "__main__":
    main()

"""Error versus time on one instance: subsampled PG-RMC, R-RMC and the fully observed baseline."""
import argparse
from dataclasses import dataclass, replace
from pathlib import Path

from robustmc.bench import run_convergence, time_to_error, write_csv
from robustmc.datagen import InstanceSpec, make_instance
from robustmc.solver import SolverConfig


@dataclass(frozen=True)
class ConvergenceExperiment:
    m: int = 1000
    rank: int = 5
    kappa: float = 2.0
    rho: float = 0.01
    p: float = 0.2
    seed: int = 1
    epsilon: float = 1e-6
    step_scale: float = 0.85
    eta_factor: float = 2.0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, default=ConvergenceExperiment.m)
    ap.add_argument("--p", type=float, default=ConvergenceExperiment.p)
    ap.add_argument("--seed", type=int, default=ConvergenceExperiment.seed)
    ap.add_argument("--out", default="results/convergence")
    args = ap.parse_args(argv)
    exp = ConvergenceExperiment(m=args.m, p=args.p, seed=args.seed)

    spec = InstanceSpec(exp.m, exp.m, exp.rank, condition_number=exp.kappa,
                        corruption_row_col_fraction=exp.rho, sampling_p=exp.p, seed=exp.seed)
    mu = make_instance(spec)[1].mu_star
    base = SolverConfig(epsilon=exp.epsilon, target_rank=exp.rank, mu=mu, step_scale=exp.step_scale,
                        eta=exp.eta_factor * mu ** 2 * exp.rank / exp.m, seed=exp.seed)
    configs = [(f"pg_rmc p={exp.p}", base), (f"r_rmc p={exp.p}", replace(base, variant="r_rmc"))]
    rows = run_convergence(spec, configs, baseline=base)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", rows)
    for label in [c[0] for c in configs] + ["p=1"]:
        print(f"{label:>16}: time to 1e-4 relative error {time_to_error(rows, label, 1e-4):.2f}s")


if __name__ == "__main__":
    main()

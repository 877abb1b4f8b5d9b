"""Command-line entry point: ``robustmc {gen,solve,rpca,bench,phase,fgbg}``.

Exit codes: 0 success, 2 argument errors, 3 solver did not converge (partial
results are still written), 1 any other failure.  Every run prints a manifest
line to stderr and writes ``manifest.json`` into its output directory.  Output
files carry no wall-clock data except the bench/phase ``timings.csv``.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import bench, datagen, fgbg
from .operators import read_coo, read_observations, write_coo, write_factors
from .sampling import SplitMode
from .solver import SolverConfig, SolverError, rpca, solve

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2, 3
CONVERGED = ("converged", "tolerance met at init")
VARIANT_NAMES = {"pg": "pg_rmc", "rank": "r_rmc", "pg_rmc": "pg_rmc", "r_rmc": "r_rmc"}


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _rate(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"expected a rate in (0, 1], got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"expected a fraction in [0, 1], got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes (bench/phase)")


def _solver_flags(p: argparse.ArgumentParser, rank_required=True):
    p.add_argument("--rank", type=_positive_int, required=rank_required)
    p.add_argument("--eps", type=_positive_float, default=1e-6)
    p.add_argument("--mu", type=_positive_float, default=1.5)
    p.add_argument("--eta", type=_positive_float, default=None)
    p.add_argument("--sigma", type=_positive_float, default=None)
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES), default="pg")
    p.add_argument("--split-mode", choices=["none", "paper", "exact"], default="none")
    p.add_argument("--step-scale", type=_rate, default=1.0)
    p.add_argument("--threshold-scale", choices=["eta", "sqrt_n", "n"], default="eta")
    p.add_argument("--time-limit", type=_positive_float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmc", description="Robust matrix completion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic instance")
    _common(g)
    g.add_argument("--m", type=_positive_int, required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--rank", type=_positive_int, required=True)
    g.add_argument("--p", type=_rate, default=1.0)
    g.add_argument("--rho", type=_fraction, default=0.0)
    g.add_argument("--kappa", type=float, default=1.0)
    g.add_argument("--value-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    g.add_argument("--random-sign", action="store_true")

    s = sub.add_parser("solve", help="recover the low-rank part of observed entries")
    _common(s)
    s.add_argument("--obs", required=True, help="observations in the sparse text format")
    s.add_argument("--p", type=_rate, default=None, help="sampling rate (default: empirical)")
    _solver_flags(s)

    r = sub.add_parser("rpca", help="robust PCA of a full matrix by subsampling")
    _common(r)
    r.add_argument("--mat", required=True, help="matrix in the sparse text format")
    r.add_argument("--p", type=_rate, required=True)
    r.add_argument("--two-pass", action="store_true")
    _solver_flags(r)

    for name, text in (("bench", "convergence or scaling experiment"), ("phase", "recovery-probability grid")):
        b = sub.add_parser(name, help=text)
        _common(b)
        b.add_argument("--grid", required=True, help="grid JSON file")
        b.add_argument("--timings", action="store_true", help="also write wall-clock timings.csv")

    f = sub.add_parser("fgbg", help="foreground/background separation of PGM frames")
    _common(f)
    f.add_argument("--frames", required=True, help="glob of P5 PGM files (sorted by name)")
    f.add_argument("--p", type=_rate, default=0.3)
    f.add_argument("--rank", type=_positive_int, default=1)
    f.add_argument("--mu", type=_positive_float, default=1.0)
    f.add_argument("--threshold-scale", choices=["eta", "sqrt_n", "n"], default="sqrt_n")
    f.add_argument("--threshold", type=_positive_float, default=None)
    return parser


# ---------------------------------------------------------------------------


def _config(args, obs_shape) -> SolverConfig:
    m, n = obs_shape
    if args.rank > min(m, n):
        raise UsageError(f"--rank {args.rank} exceeds min(m, n) = {min(m, n)}")
    return SolverConfig(
        epsilon=args.eps,
        target_rank=args.rank,
        mu=args.mu,
        eta=args.eta,
        sigma=args.sigma,
        variant=VARIANT_NAMES[args.variant],
        split_mode=SplitMode.parse(args.split_mode),
        seed=args.seed,
        step_scale=args.step_scale,
        threshold_scale=args.threshold_scale,
        time_limit=args.time_limit,
    )


def _dump(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "value"):
        return o.value
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o)}")


def _manifest(args, argv, config: Optional[dict], outputs: List[str]) -> dict:
    cfg_text = json.dumps(config, sort_keys=True, default=_json_default)
    digest = hashlib.sha256(cfg_text.encode()).hexdigest()[:16]
    print(f"robustmc {args.command}: seed={args.seed} config={digest}", file=sys.stderr)
    payload = {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "config": config,
        "config_hash": digest,
        "outputs": sorted(os.path.relpath(p, args.out) for p in outputs),
        "versions": bench.versions(),
    }
    path = os.path.join(args.out, "manifest.json")
    _dump(path, payload)
    return payload


def _report_status(report) -> int:
    return EXIT_OK if report.termination in CONVERGED else EXIT_NONCONVERGED


def cmd_gen(args, argv) -> int:
    spec = datagen.InstanceSpec(
        m=args.m, n=args.n, rank=args.rank, condition_number=args.kappa,
        corruption_row_col_fraction=args.rho,
        corruption_value_range=tuple(args.value_range) if args.value_range else None,
        sampling_p=args.p, seed=args.seed, random_sign=args.random_sign,
    )
    obs, truth = datagen.make_instance(spec)
    files = datagen.save_instance(args.out, obs, truth)
    path = os.path.join(args.out, "instance.json")
    _dump(path, dict(spec.to_dict(), mu_star=truth.mu_star))
    _manifest(args, argv, spec.to_dict(), files + [path])
    return EXIT_OK


def _write_solution(args, l_hat, report, extra=()) -> List[str]:
    files = write_factors(args.out, l_hat)
    path = os.path.join(args.out, "report.json")
    _dump(path, report.to_dict(include_timing=False))
    return files + [path] + list(extra)


def cmd_solve(args, argv) -> int:
    obs = read_observations(args.obs, args.p)
    cfg = _config(args, obs.shape)
    try:
        l_hat, report = solve(obs, cfg)
    except SolverError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        if exc.partial is not None:
            files = write_factors(args.out, exc.partial)
            _manifest(args, argv, cfg.to_dict(), files)
        return EXIT_NONCONVERGED
    files = _write_solution(args, l_hat, report)
    _manifest(args, argv, cfg.to_dict(), files)
    return _report_status(report)


def cmd_rpca(args, argv) -> int:
    mat = read_coo(args.mat)
    cfg = _config(args, mat.shape)
    try:
        l_hat, s_hat, report = rpca(mat, args.p, cfg, two_pass=args.two_pass, seed=args.seed)
    except SolverError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        if exc.partial is not None:
            _manifest(args, argv, cfg.to_dict(), write_factors(args.out, exc.partial))
        return EXIT_NONCONVERGED
    extra = []
    if s_hat is not None:
        path = os.path.join(args.out, "sparse.txt")
        write_coo(path, s_hat)
        extra.append(path)
    files = _write_solution(args, l_hat, report, extra)
    _manifest(args, argv, dict(cfg.to_dict(), p=args.p, two_pass=args.two_pass), files)
    return _report_status(report)


def _load_grid(path):
    with open(path) as fh:
        d = json.load(fh)
    mode = d.pop("mode", None)
    axis = d.pop("axis", "rank")
    return bench.ExperimentGrid.from_dict(d), mode, axis


def cmd_phase(args, argv) -> int:
    grid, _, _ = _load_grid(args.grid)
    grid = replace(grid, seed=args.seed) if args.seed else grid
    cells, trials = bench.run_phase_transition(grid, workers=args.jobs)
    files = bench.save_phase(args.out, grid, cells, trials, timings=args.timings)
    _manifest(args, argv, grid.to_dict(), files)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    grid, mode, axis = _load_grid(args.grid)
    grid = replace(grid, seed=args.seed) if args.seed else grid
    os.makedirs(args.out, exist_ok=True)
    mode = mode or "convergence"
    if mode == "scaling":
        rows = bench.run_scaling(grid, axis=axis, workers=args.jobs)
        main = os.path.join(args.out, "scaling.csv")
        bench.write_csv(main, rows, exclude=("seconds",))
    elif mode == "convergence":
        spec = replace(grid.template, seed=bench.trial_seed(grid.seed, 0, 0))
        _, truth = datagen.make_instance(spec)
        cfg = grid.solver_config(spec, truth.mu_star, spec.seed)
        rows = []
        for p in grid.p_values or (spec.sampling_p,):
            rows += bench.run_convergence(replace(spec, sampling_p=p), [(f"p={p:g}", cfg)])
        rows += bench.run_convergence(replace(spec, sampling_p=1.0), [("p=1", cfg)])
        main = os.path.join(args.out, "trace.csv")
        bench.write_csv(main, rows, exclude=("seconds",))
    else:
        raise UsageError(f"unknown bench mode {mode!r}")
    files = [main]
    if args.timings:
        files.append(os.path.join(args.out, "timings.csv"))
        bench.write_csv(files[-1], rows)
    grid_path = os.path.join(args.out, "grid.json")
    _dump(grid_path, dict(grid.to_dict(), mode=mode, axis=axis))
    _manifest(args, argv, dict(grid.to_dict(), mode=mode, axis=axis), files + [grid_path])
    return EXIT_OK


def cmd_fgbg(args, argv) -> int:
    paths = sorted(glob.glob(args.frames))
    if not paths:
        raise UsageError(f"no frames match {args.frames!r}")
    stack = fgbg.load_frames(paths)
    if args.rank > min(stack.shape):
        raise UsageError(f"--rank {args.rank} exceeds the stack dimensions {stack.shape}")
    cfg = replace(
        fgbg.default_config(stack, args.rank, args.seed), mu=args.mu, threshold_scale=args.threshold_scale
    )
    sep = fgbg.separate(stack, args.p, cfg, rank=args.rank, seed=args.seed, threshold=args.threshold)
    files = fgbg.save_separation(sep, args.out)
    path = os.path.join(args.out, "report.json")
    _dump(path, dict(sep.report.to_dict(include_timing=False), foreground_threshold=sep.threshold))
    _manifest(args, argv, dict(cfg.to_dict(), p=args.p, frames=paths), files + [path])
    return _report_status(sep.report)


COMMANDS = {
    "gen": cmd_gen, "solve": cmd_solve, "rpca": cmd_rpca,
    "bench": cmd_bench, "phase": cmd_phase, "fgbg": cmd_fgbg,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"robustmc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"robustmc {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Experiment harness: convergence traces, recovery-probability grids and scaling sweeps.

Every trial derives its seed from ``SeedSequence([grid_seed, cell, trial])`` so a
single row can be rerun in isolation.  Trials may run on a process pool; rows
are always emitted in (cell, trial) order.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from .datagen import InstanceSpec, make_instance
from .operators import LowRankFactors, frob_error, frob_norm
from .solver import SolverConfig, SolverError, solve

AXES = ("p", "rho", "rank", "kappa")
SCALING_AXES = ("rank", "mu")


def trial_seed(grid_seed: int, cell: int, trial: int) -> int:
    return int(np.random.SeedSequence([grid_seed, cell, trial]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class ExperimentGrid:
    """Instance template plus swept axes.

    Axis values left empty fall back to the template.  ``solver`` holds
    :class:`SolverConfig` overrides; ``eta_factor`` (if set) gives
    eta = eta_factor * mu^2 r / min(m, n) with mu measured on each instance.
    """

    template: InstanceSpec
    p_values: Tuple[float, ...] = ()
    rho_values: Tuple[float, ...] = ()
    ranks: Tuple[int, ...] = ()
    kappas: Tuple[float, ...] = ()
    mu_values: Tuple[float, ...] = ()
    trials: int = 1
    threshold: float = 1e-3
    time_limit: float = 60.0
    epsilon: float = 1e-6
    seed: int = 0
    solver: Dict[str, object] = field(default_factory=dict)
    eta_factor: Optional[float] = None
    use_measured_mu: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if not self.time_limit > 0:
            raise ValueError("time_limit must be > 0")
        for key in self.solver:
            if key not in SolverConfig.__dataclass_fields__ or key in ("epsilon", "target_rank"):
                raise ValueError(f"unsupported solver override {key!r}")

    def cells(self) -> List[Dict[str, float]]:
        t = self.template
        axes = [
            [("p", v) for v in (self.p_values or (t.sampling_p,))],
            [("rho", v) for v in (self.rho_values or (t.corruption_row_col_fraction,))],
            [("rank", v) for v in (self.ranks or (t.rank,))],
            [("kappa", v) for v in (self.kappas or (t.condition_number,))],
        ]
        return [dict(c) for c in itertools.product(*axes)]

    def instance_spec(self, cell: Dict[str, float], seed: int) -> InstanceSpec:
        return replace(
            self.template,
            sampling_p=float(cell["p"]),
            corruption_row_col_fraction=float(cell["rho"]),
            rank=int(cell["rank"]),
            condition_number=float(cell["kappa"]),
            seed=seed,
        )

    def solver_config(self, spec: InstanceSpec, mu_star: float, seed: int, mu=None) -> SolverConfig:
        kw = dict(self.solver)
        if mu is not None:
            kw["mu"] = float(mu)
        elif self.use_measured_mu:
            kw["mu"] = float(mu_star)
        cfg = SolverConfig(
            epsilon=self.epsilon, target_rank=spec.rank, seed=seed,
            time_limit=self.time_limit, **kw,
        )
        if self.eta_factor is not None and "eta" not in self.solver:
            cfg = replace(cfg, eta=self.eta_factor * cfg.mu ** 2 * spec.rank / min(spec.m, spec.n))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template"] = self.template.to_dict()
        for k in ("p_values", "rho_values", "ranks", "kappas", "mu_values"):
            d[k] = list(d[k])
        d["solver"] = {k: (v.value if hasattr(v, "value") else v) for k, v in self.solver.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGrid":
        d = dict(d)
        tmpl = dict(d.pop("template"))
        if tmpl.get("corruption_value_range") is not None:
            tmpl["corruption_value_range"] = tuple(tmpl["corruption_value_range"])
        for k in ("p_values", "rho_values", "ranks", "kappas", "mu_values"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(template=InstanceSpec(**tmpl), **d)


def relative_error(l_hat: LowRankFactors, l_star: LowRankFactors) -> float:
    return frob_error(l_hat, l_star) / frob_norm(l_star)


# ---- phase transition -------------------------------------------------------


@dataclass(frozen=True)
class TrialRow:
    cell: int
    trial: int
    seed: int
    p: float
    rho: float
    rank: int
    kappa: float
    mu_star: float
    rel_error: float
    success: bool
    iterations: int
    stages: int
    termination: str
    seconds: float


def _run_trial(args) -> TrialRow:
    grid, cell_idx, cell, trial = args
    seed = trial_seed(grid.seed, cell_idx, trial)
    spec = grid.instance_spec(cell, seed)
    obs, truth = make_instance(spec)
    cfg = grid.solver_config(spec, truth.mu_star, seed)
    clock = time.perf_counter()
    try:
        l_hat, report = solve(obs, cfg)
        termination, iters, stages = report.termination, report.total_inner_iterations, report.stages
    except SolverError as exc:
        l_hat = exc.partial if exc.partial is not None else LowRankFactors.zeros(spec.m, spec.n)
        termination, iters, stages = f"error: {exc}", -1, -1
    seconds = time.perf_counter() - clock
    err = relative_error(l_hat, truth.l_star)
    ok = bool(np.isfinite(err) and err <= grid.threshold and termination != "time limit")
    return TrialRow(
        cell_idx, trial, seed, float(cell["p"]), float(cell["rho"]), int(cell["rank"]),
        float(cell["kappa"]), truth.mu_star, err, ok, iters, stages, termination, seconds,
    )


def _map(fn, jobs: List, workers: int) -> List:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_trials(grid: ExperimentGrid, workers: int = 1) -> List[TrialRow]:
    jobs = [(grid, c, cell, t) for c, cell in enumerate(grid.cells()) for t in range(grid.trials)]
    rows = _map(_run_trial, jobs, workers)
    return sorted(rows, key=lambda r: (r.cell, r.trial))


@dataclass(frozen=True)
class CellRow:
    cell: int
    p: float
    rho: float
    rank: int
    kappa: float
    trials: int
    successes: int

    @property
    def probability(self) -> float:
        return self.successes / self.trials


def summarize(rows: Sequence[TrialRow]) -> List[CellRow]:
    out = []
    for cell, group in itertools.groupby(sorted(rows, key=lambda r: (r.cell, r.trial)), key=lambda r: r.cell):
        g = list(group)
        r0 = g[0]
        out.append(CellRow(cell, r0.p, r0.rho, r0.rank, r0.kappa, len(g), sum(r.success for r in g)))
    return out


def run_phase_transition(grid: ExperimentGrid, workers: int = 1) -> Tuple[List[CellRow], List[TrialRow]]:
    """Per-cell recovery probability (success = relative error within threshold and time limit)."""
    trials = run_trials(grid, workers)
    return summarize(trials), trials


# ---- convergence traces -----------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    method: str
    stage: int
    t: int
    seconds: float
    error: float
    rel_error: float


def run_convergence(
    spec: InstanceSpec,
    configs: Sequence[Tuple[str, SolverConfig]],
    baseline: Optional[SolverConfig] = None,
) -> List[TraceRow]:
    """Per-iteration (time, error) samples for each labelled config on one instance.

    ``baseline`` (if given) runs on the same low-rank and corruption draw fully
    observed (p = 1) under the label ``"p=1"``.  Solver failures are recorded as a
    single row with ``stage = -1`` and the run continues.
    """
    runs = []
    if configs:
        runs += [(label, cfg, spec) for label, cfg in configs]
        if baseline is not None:
            runs.append(("p=1", baseline, replace(spec, sampling_p=1.0)))
    rows: List[TraceRow] = []
    for label, cfg, sp in runs:
        obs, truth = make_instance(sp)
        ref = frob_norm(truth.l_star)
        trace: List[TraceRow] = []

        def record(state, rec, label=label, trace=trace):
            err = frob_error(state.l, truth.l_star)
            trace.append(TraceRow(label, rec.stage, rec.t, rec.elapsed, err, err / ref))

        try:
            solve(obs, cfg, record)
        except SolverError as exc:
            trace.append(TraceRow(label, -1, -1, float("nan"), float("nan"), float("nan")))
            trace[-1] = replace(trace[-1], method=f"{label} ({exc})")
        rows += trace
    return rows


def time_to_error(rows: Sequence[TraceRow], method: str, rel_error: float) -> float:
    """First elapsed time at which ``method`` reached ``rel_error`` (inf if never)."""
    for r in rows:
        if r.method == method and r.rel_error <= rel_error:
            return r.seconds
    return float("inf")


# ---- scaling ---------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    axis: str
    value: float
    trial: int
    seed: int
    reached: bool
    iterations: int
    seconds: float


def _run_scaling(args) -> ScalingRow:
    grid, axis, idx, value, trial = args
    seed = trial_seed(grid.seed, idx, trial)
    t = grid.template
    cell = {"p": t.sampling_p, "rho": t.corruption_row_col_fraction, "rank": t.rank, "kappa": t.condition_number}
    if axis == "rank":
        cell["rank"] = int(value)
    spec = grid.instance_spec(cell, seed)
    obs, truth = make_instance(spec)
    cfg = grid.solver_config(spec, truth.mu_star, seed, mu=value if axis == "mu" else None)
    ref = frob_norm(truth.l_star)
    hit: List[Tuple[int, float]] = []
    count = [0]

    def record(state, rec):
        count[0] += 1
        if not hit and frob_error(state.l, truth.l_star) <= grid.threshold * ref:
            hit.append((count[0], rec.elapsed))

    try:
        solve(obs, cfg, record)
    except SolverError:
        pass
    if hit:
        return ScalingRow(axis, float(value), trial, seed, True, hit[0][0], hit[0][1])
    return ScalingRow(axis, float(value), trial, seed, False, count[0], float("inf"))


def run_scaling(grid: ExperimentGrid, axis: str = "rank", workers: int = 1) -> List[ScalingRow]:
    """Time to reach the grid's relative-error threshold along ``rank`` or solver ``mu``.

    Cells that never reach the threshold are kept as rows with ``reached=False``.
    """
    if axis not in SCALING_AXES:
        raise ValueError(f"axis must be one of {SCALING_AXES}")
    values = grid.ranks if axis == "rank" else grid.mu_values
    if not values:
        values = (grid.template.rank,) if axis == "rank" else (grid.solver.get("mu", 1.5),)
    jobs = [(grid, axis, i, v, t) for i, v in enumerate(values) for t in range(grid.trials)]
    return _map(_run_scaling, jobs, workers)


# ---- output ----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.16e}"
    return str(v)


def write_csv(path, rows: Sequence, exclude: Sequence[str] = ()) -> None:
    """Header plus one row per dataclass record; reals in 17-digit scientific notation."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not rows:
            return
        names = [k for k in asdict(rows[0]) if k not in exclude]
        w.writerow(names)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[k]) for k in names])


def versions() -> dict:
    from . import __version__

    return {
        "robustmc": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def save_phase(directory, grid: ExperimentGrid, cells, trials, timings: bool = False) -> List[str]:
    """cells.csv, trials.csv and grid.json carry no wall-clock data.

    With ``timings`` the per-trial seconds go to timings.csv, the only file that
    differs between repeated runs.
    """
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, n) for n in ("cells.csv", "trials.csv", "timings.csv", "grid.json")]
    rows = [dict(asdict(c), probability=c.probability) for c in cells]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows:
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([_fmt(v) for v in r.values()])
    write_csv(paths[1], trials, exclude=("seconds",))
    if timings:
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "trial", "seconds"])
            for r in trials:
                w.writerow([r.cell, r.trial, _fmt(r.seconds)])
    write_manifest(paths[3], {"grid": grid.to_dict(), "seeds": [[r.cell, r.trial, r.seed] for r in trials],
                              "versions": versions()})
    return paths if timings else [paths[0], paths[1], paths[3]]


__all__ = [
    "ExperimentGrid", "TrialRow", "CellRow", "TraceRow", "ScalingRow", "trial_seed",
    "relative_error", "run_trials", "summarize", "run_phase_transition", "run_convergence",
    "time_to_error", "run_scaling", "write_csv", "write_manifest", "save_phase", "versions",
]

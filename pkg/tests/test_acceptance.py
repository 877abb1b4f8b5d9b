"""Acceptance criteria, one test per criterion, each logging a single PASS/FAIL line.

Recovery runs use the tuned configuration (step scale 0.85, eta = 2 mu^2 r / m);
see the README for why the library defaults are not used here.
"""
import time
from fractions import Fraction
from functools import lru_cache
from math import comb

import numpy as np
import pytest

from conftest import random_structured, record_criterion, record_note, subspace_angle
from robustmc.bench import ExperimentGrid, relative_error, run_phase_transition
from robustmc.cli import main
from robustmc.datagen import InstanceSpec, gen_lowrank, make_instance
from robustmc.fgbg import separate, synthetic_scene, write_frames
from robustmc.operators import (
    ObservationSet,
    SparseCoo,
    StructuredMatrix,
    hard_threshold,
    incoherence,
    inf_norm,
    project_observed,
    spectral_density,
    write_coo,
)
from robustmc.sampling import bernoulli_sample, split_samples, split_weights
from robustmc.solver import SolverConfig, pass2_default, rpca, solve
from robustmc.spectral import (
    select_stage_rank,
    spectral_norm_estimate,
    top_singular_values,
    truncated_svd,
)

N, R, KAPPA, RHO, P = 400, 5, 2.0, 0.01, 0.2
EPS = 1e-6
STEP = 0.85


def tuned_eta(mu, r, m):
    return 2.0 * mu ** 2 * r / m


def low_mu_seeds(m, count, limit=2.0):
    out, seed = [], 0
    while len(out) < count:
        if incoherence(gen_lowrank(InstanceSpec(m, m, R, condition_number=KAPPA, seed=seed))) <= limit:
            out.append(seed)
        seed += 1
    return out


@lru_cache(maxsize=None)
def seeds_400():
    return tuple(low_mu_seeds(N, 20))


def rmc_spec(seed, rho=RHO, value_range=None):
    return InstanceSpec(N, N, R, condition_number=KAPPA, corruption_row_col_fraction=rho,
                        corruption_value_range=value_range, sampling_p=P, seed=seed)


def run(spec, variant="pg_rmc", time_limit=30.0, sigma=None, callback=None):
    obs, truth = make_instance(spec)
    mu = truth.mu_star
    cfg = SolverConfig(epsilon=EPS, target_rank=R, mu=mu, eta=tuned_eta(mu, R, spec.m), sigma=sigma,
                       variant=variant, step_scale=STEP, time_limit=time_limit, seed=spec.seed)
    t0 = time.perf_counter()
    l_hat, rep = solve(obs, cfg, callback)
    return relative_error(l_hat, truth.l_star), time.perf_counter() - t0, rep, truth


# ---------------------------------------------------------------- 1-3, 9: recovery

def test_criterion_1_pg_rmc_recovery():
    ok = 0
    worst_t = 0.0
    for s in seeds_400():
        rel, secs, _, _ = run(rmc_spec(s))
        worst_t = max(worst_t, secs)
        ok += rel <= 1e-4 and secs <= 30.0
    assert record_criterion(1, ok >= 18, f"PG-RMC 400x400 p=0.2: {ok}/20 seeds rel<=1e-4 within 30s "
                                         f"(slowest {worst_t:.1f}s)")


def test_criterion_2_r_rmc_parity():
    ok = stage_ok = 0
    for s in seeds_400():
        rel, _, rep, _ = run(rmc_spec(s), variant="r_rmc", time_limit=None)
        ok += rel <= 1e-4
        stage_ok += rep.stages == R
    passed = ok >= 18 and stage_ok == 20
    assert record_criterion(2, passed, f"R-RMC: {ok}/20 seeds rel<=1e-4, {stage_ok}/20 with exactly {R} stages")


def test_criterion_3_matrix_completion():
    ok = 0
    for s in seeds_400():
        rel, _, _, _ = run(rmc_spec(s, rho=0.0))
        ok += rel <= 1e-6
    assert record_criterion(3, ok >= 19, f"MC (rho=0): {ok}/20 seeds rel<=1e-6")


def test_criterion_9_support_containment():
    ok = 0
    sigma = 1.0
    for s in seeds_400():
        mu = incoherence(gen_lowrank(rmc_spec(s)))
        z0 = tuned_eta(mu, R, N) * sigma
        spec = rmc_spec(s, value_range=(4 * z0, 8 * z0))
        obs, truth = make_instance(spec)
        planted = set((truth.s_star.rows * N + truth.s_star.cols).tolist())
        observed = set((obs.samples.rows * N + obs.samples.cols).tolist())
        allowed = planted & observed
        bad = [0]

        def check(state, rec):
            bad[0] += len(set((state.s.rows * N + state.s.cols).tolist()) - allowed)

        run(spec, sigma=sigma, callback=check)
        ok += bad[0] == 0
    assert record_criterion(9, ok >= 18, f"support containment at every iteration: {ok}/20 seeds")


# ---------------------------------------------------------------- 4: RPCA

def rpca_case(seed, p):
    """Returns (rel error, support verdict or None when magnitudes are not above 4x the threshold, seconds)."""
    spec = InstanceSpec(500, 500, R, condition_number=KAPPA, corruption_row_col_fraction=RHO, seed=seed)
    _, truth = make_instance(spec)
    mat = truth.dense()
    mu = truth.mu_star
    cfg = SolverConfig(epsilon=EPS, target_rank=R, mu=mu, eta=tuned_eta(mu, R, 500), step_scale=STEP,
                       time_limit=60.0, seed=seed)
    t0 = time.perf_counter()
    l_hat, s_hat, rep = rpca(mat, p, cfg)
    secs = time.perf_counter() - t0
    rel = relative_error(l_hat, truth.l_star)
    key = lambda s: set((s.rows * 500 + s.cols).tolist())  # noqa: E731
    separated = np.abs(truth.s_star.vals).min() > 4 * pass2_default(rep)
    support = (key(s_hat) == key(truth.s_star)) if separated else None
    return rel, support, secs


def rpca_verdict(seeds, p, baselines):
    rows = [rpca_case(s, p) + (baselines[s],) for s in seeds]
    ok = sum(rel <= 1e-4 and sup is not False and secs < base for rel, sup, secs, base in rows)
    label = {True: "exact", False: "wrong", None: "n/a"}
    detail = ", ".join(f"rel={r:.1e} support={label[u]} {t:.1f}s vs {b:.1f}s" for r, u, t, b in rows)
    return ok, detail


def test_criterion_4_rpca():
    seeds = low_mu_seeds(500, 3)
    baselines = {s: rpca_case(s, 1.0)[2] for s in seeds}
    ok, detail = rpca_verdict(seeds, 0.1, baselines)
    passed = record_criterion(4, ok == len(seeds), f"RPCA 500x500 p=0.1: {ok}/{len(seeds)} seeds ({detail})")
    # the same check at a rate where subsampled projected gradient converges
    ok2, detail2 = rpca_verdict(seeds, 0.2, baselines)
    record_note(4, f"same check at p=0.2: {ok2}/{len(seeds)} seeds ({detail2})")
    assert passed


# ---------------------------------------------------------------- 5: phase transition

def test_criterion_5_phase_transition():
    ps = tuple(round(0.02 + 0.04 * i, 2) for i in range(8))
    common = dict(trials=10, time_limit=20.0, epsilon=EPS, seed=11, solver={"step_scale": STEP}, eta_factor=2.0)
    grid = ExperimentGrid(InstanceSpec(N, N, R, condition_number=KAPPA, corruption_row_col_fraction=RHO),
                          p_values=ps, **common)
    cells, _ = run_phase_transition(grid)
    probs = [c.probability for c in cells]
    heavy = ExperimentGrid(InstanceSpec(N, N, R, condition_number=KAPPA, corruption_row_col_fraction=0.2),
                           p_values=(0.3,), **common)
    (hcell,), _ = run_phase_transition(heavy)
    monotone = all(probs[j] >= probs[i] - 0.1 for i in range(len(probs)) for j in range(i + 1, len(probs)))
    passed = monotone and probs[-1] >= 0.9 and probs[0] <= 0.1 and hcell.probability <= 0.1
    curve = " ".join(f"{p:.2f}:{q:.1f}" for p, q in zip(ps, probs))
    assert record_criterion(5, passed, f"phase transition {curve}; rho=0.2 at p=0.3: {hcell.probability:.1f}")


# ---------------------------------------------------------------- 6: spectral oracle

def test_criterion_6_spectral_oracle():
    g = np.random.default_rng(606)
    bad = 0
    for _ in range(200):
        m, n = int(g.integers(10, 81)), int(g.integers(10, 81))
        k = int(g.integers(1, 6))
        a = random_structured(g, m, n, k=int(g.integers(0, 8)), density=float(g.uniform(0.02, 0.3)))
        f = truncated_svd(a, k)
        u, s, vt = np.linalg.svd(a.toarray())
        vals_ok = np.allclose(f.sigma, s[:k], rtol=1e-8, atol=1e-12 * s[0])
        angle = max(subspace_angle(f.u, u[:, :k]), subspace_angle(f.v, vt[:k].T))
        bad += not (vals_ok and angle <= 1e-6)
    assert record_criterion(6, bad == 0, f"truncated SVD vs dense oracle: {bad}/200 mismatches")


# ---------------------------------------------------------------- 7: operator properties

def test_criterion_7_operator_properties():
    g = np.random.default_rng(707)
    fails = dict.fromkeys(["projection", "threshold", "sparse_bound", "weyl", "stage_rank"], 0)
    for _ in range(1000):
        m, n = int(g.integers(1, 12)), int(g.integers(1, 12))
        a, b = g.standard_normal((m, n)), g.standard_normal((m, n))
        alpha = float(g.normal())
        idx = np.nonzero(g.random((m, n)) < 0.5)
        once = project_observed(idx, a)
        twice = project_observed(idx, once)
        lin = project_observed(idx, a + alpha * b).toarray()
        ref = project_observed(idx, a).toarray() + alpha * project_observed(idx, b).toarray()
        fails["projection"] += not (np.array_equal(once.toarray(), twice.toarray())
                                    and np.allclose(lin, ref, rtol=1e-12, atol=1e-12))

        zeta = float(g.uniform(0, 2))
        out = hard_threshold(once, zeta)
        keep = np.abs(once.vals) >= zeta
        fails["threshold"] += not (np.array_equal(out.rows, once.rows[keep])
                                   and np.array_equal(out.cols, once.cols[keep])
                                   and np.array_equal(out.vals, once.vals[keep]))

        mask = g.random((m, n)) < g.uniform(0.05, 0.5)
        sp = SparseCoo.from_dense(np.where(mask, a, 0.0))
        if sp.nnz:
            est = spectral_norm_estimate(StructuredMatrix.from_sparse(sp))
            fails["sparse_bound"] += est > spectral_density(sp) * max(m, n) * inf_norm(sp) + 1e-8

        k = min(m, n, int(g.integers(1, 5)))
        e = float(g.uniform(0.01, 1)) * g.standard_normal((m, n))
        sa = top_singular_values(StructuredMatrix.from_sparse(SparseCoo.from_dense(a)), k)
        sae = top_singular_values(StructuredMatrix.from_sparse(SparseCoo.from_dense(a + e)), k)
        fails["weyl"] += not np.all(np.abs(sae - sa) <= np.linalg.norm(e, 2) + 1e-8)

        spec = sorted(g.exponential(size=int(g.integers(1, 12))) + 1e-6, reverse=True)
        prev = int(g.integers(0, len(spec)))
        c = float(10 ** g.uniform(-3, 3))
        fails["stage_rank"] += select_stage_rank(spec, prev) != select_stage_rank([c * x for x in spec], prev)
    detail = ", ".join(f"{k}={v}" for k, v in fails.items())
    assert record_criterion(7, not any(fails.values()), f"1000 cases each, violations: {detail}")


# ---------------------------------------------------------------- 8: sampling

def test_criterion_8_sampling():
    p, t, m, reps = 0.2, 4, 120, 200
    p_in = 1 - (1 - p) ** t
    inclusion, pairs = [], []
    for seed in range(reps):
        idx = bernoulli_sample(m, m, p_in, seed)
        obs = ObservationSet(m, m, project_observed(idx, np.ones((m, m))), p_in)
        member = np.stack([np.isin(np.arange(m * m), s.rows * m + s.cols)
                           for s in split_samples(obs, p, t, "exact", seed)])
        inclusion.append(member.mean(axis=1))
        pairs.append([(member[a] & member[b]).mean() for a in range(t) for b in range(a + 1, t)])
    total = reps * m * m
    marg_ok = np.all(np.abs(np.mean(inclusion, axis=0) - p) <= 4 * np.sqrt(p * (1 - p) / total))
    pair_ok = np.all(np.abs(np.mean(pairs, axis=0) - p * p) <= 4 * np.sqrt(p * p * (1 - p * p) / total))
    weights_ok = all(split_weights(T) == [Fraction(comb(T, r), 2 ** T - 1) for r in range(1, T + 1)]
                     for T in range(1, 11))
    passed = bool(marg_ok and pair_ok and weights_ok)
    assert record_criterion(8, passed, f"coupling marginals={'ok' if marg_ok else 'bad'} "
                                       f"pairs={'ok' if pair_ok else 'bad'} weights T<=10={'ok' if weights_ok else 'bad'}")


# ---------------------------------------------------------------- 10: fgbg

def test_criterion_10_fgbg():
    scores = []
    for seed in range(5):
        stack, mask = synthetic_scene(seed=seed)
        sep = separate(stack, 0.3, seed=seed)
        bg = np.array([np.median(row[~mk]) for row, mk in zip(stack.data, mask)])
        found = np.zeros(mask.shape, bool)
        found[sep.foreground.rows, sep.foreground.cols] = True
        rmse = float(np.sqrt(np.mean((sep.background.data - bg[:, None]) ** 2)))
        recall = (found & mask).sum() / mask.sum()
        precision = (found & mask).sum() / max(found.sum(), 1)
        scores.append((rmse, recall, precision))
    ok = sum(e <= 1e-2 and r >= 0.95 and q >= 0.9 for e, r, q in scores)
    detail = ", ".join(f"rmse={e:.1e} recall={r:.2f} precision={q:.2f}" for e, r, q in scores)
    assert record_criterion(10, ok == len(scores), f"fgbg p=0.3, {ok}/{len(scores)} scenes ({detail})")


# ---------------------------------------------------------------- 11: determinism

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_cli_determinism(tmp_path, monkeypatch):
    inst = tmp_path / "inst"
    assert main(["gen", "--m", "120", "--n", "100", "--rank", "2", "--p", "0.5", "--rho", "0.02",
                 "--seed", "3", "--out", str(inst)]) == 0
    _, truth = make_instance(InstanceSpec(120, 100, 2, corruption_row_col_fraction=0.02, sampling_p=1.0, seed=3))
    write_coo(tmp_path / "full.txt", SparseCoo.from_dense(truth.dense()))
    stack, _ = synthetic_scene(nframes=12)
    write_frames(stack, tmp_path / "frames")
    grid = tmp_path / "grid.json"
    grid.write_text('{"template": {"m": 40, "n": 40, "rank": 2, "corruption_row_col_fraction": 0.05},'
                    ' "p_values": [0.5, 0.9], "trials": 2, "eta_factor": 2.0, "solver": {"step_scale": 0.85}}')
    bench = tmp_path / "bench.json"
    bench.write_text('{"template": {"m": 40, "n": 40, "rank": 2, "sampling_p": 0.6}, "mode": "convergence",'
                     ' "eta_factor": 2.0, "solver": {"step_scale": 0.85}}')
    commands = {
        "gen": ["gen", "--m", "60", "--n", "50", "--rank", "2", "--p", "0.4", "--rho", "0.02", "--seed", "1"],
        "solve": ["solve", "--obs", str(inst / "obs.txt"), "--rank", "2", "--seed", "4"],
        "rpca": ["rpca", "--mat", str(tmp_path / "full.txt"), "--p", "0.5", "--rank", "2", "--seed", "2"],
        "phase": ["phase", "--grid", str(grid), "--seed", "5"],
        "bench": ["bench", "--grid", str(bench)],
        "fgbg": ["fgbg", "--frames", str(tmp_path / "frames" / "*.pgm"), "--p", "0.5"],
    }
    differing = []
    for name, argv in commands.items():
        trees = []
        for run_dir in ("first", "second"):
            cwd = tmp_path / name / run_dir
            cwd.mkdir(parents=True)
            monkeypatch.chdir(cwd)
            main(argv + ["--out", "out"])
            trees.append(_tree(cwd / "out"))
        if not trees[0] or trees[0] != trees[1]:
            differing.append(name)
    assert record_criterion(11, not differing, f"byte-identical outputs for {len(commands) - len(differing)}/"
                                               f"{len(commands)} subcommands" + (f" (differ: {differing})" if differing else ""))

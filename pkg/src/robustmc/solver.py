"""Stagewise projected gradient descent with hard thresholding for robust matrix completion.

Two outer-loop variants share one inner iteration:

* ``pg_rmc`` picks each stage's rank from the spectrum of the current gradient
  iterate (all singular values above half of the first unresolved one);
* ``r_rmc`` raises the rank by one per stage.

The gradient iterate ``M_t = L_t - (mn/|Omega|) P_Omega(L_t + S_t - M)`` is kept
as a :class:`StructuredMatrix` and never densified.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .operators import (
    IndexSet,
    LowRankFactors,
    ObservationSet,
    SparseCoo,
    StructuredMatrix,
    frob_error,
    project_observed,
)
from .sampling import SplitMode, SplitPlan, bernoulli_sample, split_samples
from .spectral import (
    ConvergenceError,
    SvdOptions,
    select_stage_rank,
    spectral_norm_estimate,
    truncated_svd,
)

VARIANTS = ("pg_rmc", "r_rmc")
THRESHOLD_SCALES = ("eta", "sqrt_n", "n")
SIGMA_INFLATION = 1.05
DIVERGENCE_FACTOR = 1e3
SETTLE_RATIO = 1e-3


class SolverError(RuntimeError):
    """Solver failure with the stage / iteration where it happened."""

    def __init__(self, message, stage=None, t=None, partial=None):
        super().__init__(message)
        self.stage = stage
        self.t = t
        self.partial = partial


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float
    target_rank: int
    mu: float = 1.5
    eta: Optional[float] = None
    sigma: Optional[float] = None
    variant: str = "pg_rmc"
    split_mode: SplitMode = SplitMode.NO_SPLIT
    inner_iters_override: Optional[int] = None
    max_stages_override: Optional[int] = None
    seed: int = 0
    threshold_scale: str = "eta"
    stall_factor: float = 1e-3
    step_scale: float = 1.0
    time_limit: Optional[float] = None
    svd: SvdOptions = field(default_factory=SvdOptions)

    def __post_init__(self):
        object.__setattr__(self, "split_mode", SplitMode.parse(self.split_mode))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.target_rank < 1:
            raise ValueError("target_rank must be >= 1")
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must lie in (0, 1]")
        if self.threshold_scale not in THRESHOLD_SCALES:
            raise ValueError(f"threshold_scale must be one of {THRESHOLD_SCALES}")
        for name in ("inner_iters_override", "max_stages_override"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1")

    def default_eta(self, m: int, n: int) -> float:
        # the smaller dimension plays the role of m throughout the analysis
        return 4.0 * self.mu ** 2 * self.target_rank / min(m, n)

    def resolved(self, obs: ObservationSet) -> "SolverConfig":
        """Copy with eta and sigma filled in from the observations."""
        m, n = obs.shape
        eta = self.eta if self.eta is not None else self.default_eta(m, n)
        sigma = self.sigma
        if sigma is None:
            scale = m * n / obs.samples.nnz
            est = spectral_norm_estimate(StructuredMatrix.from_sparse(obs.samples, scale), self.svd)
            sigma = SIGMA_INFLATION * est if est > 0 else 1.0
        return replace(self, eta=eta, sigma=sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_mode"] = self.split_mode.value
        return d


@dataclass(frozen=True)
class SolverState:
    l: LowRankFactors
    s: SparseCoo
    m_struct: StructuredMatrix
    zeta: float
    stage: int = 0
    stage_rank: int = 0
    inner_t: int = 0
    sigma_k: float = float("nan")
    sigma_k1: float = float("nan")
    step_change: float = float("nan")


@dataclass(frozen=True)
class IterationRecord:
    stage: int
    t: int
    rank: int
    zeta_used: float
    zeta_next: float
    sigma_k: float
    sigma_k1: float
    support: int
    step_change: float
    elapsed: float


@dataclass
class SolverReport:
    variant: str
    epsilon: float
    eta: float
    sigma: float
    mu: float
    inner_iters: int
    stage_cap: int
    records: List[IterationRecord] = field(default_factory=list)
    stage_spectra: List[List[float]] = field(default_factory=list)
    stage_ranks: List[int] = field(default_factory=list)
    stage_exits: List[str] = field(default_factory=list)
    termination: str = ""
    final_zeta: float = float("nan")
    elapsed: float = 0.0

    @property
    def stages(self) -> int:
        return len(self.stage_ranks)

    @property
    def total_inner_iterations(self) -> int:
        return len(self.records)

    def to_dict(self, include_timing: bool = True) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not include_timing:
                d.pop("elapsed")
            recs.append(d)
        out = {
            "variant": self.variant,
            "epsilon": self.epsilon,
            "eta": self.eta,
            "sigma": self.sigma,
            "mu": self.mu,
            "inner_iters": self.inner_iters,
            "stage_cap": self.stage_cap,
            "termination": self.termination,
            "stages": self.stages,
            "total_inner_iterations": self.total_inner_iterations,
            "stage_ranks": list(self.stage_ranks),
            "stage_exits": list(self.stage_exits),
            "stage_spectra": [list(s) for s in self.stage_spectra],
            "final_zeta": self.final_zeta,
            "records": recs,
        }
        if include_timing:
            out["elapsed"] = self.elapsed
        return out


def default_inner_iters(config: SolverConfig, sigma: Optional[float] = None) -> int:
    """T = ceil(10 ln(10 mu^2 r sigma / epsilon)), at least 1."""
    if config.inner_iters_override is not None:
        return int(config.inner_iters_override)
    sigma = config.sigma if sigma is None else sigma
    if sigma is None:
        raise ValueError("sigma is needed to size the inner loop")
    arg = 10.0 * config.mu ** 2 * config.target_rank * sigma / config.epsilon
    if arg <= 1.0:
        return 1
    # round away float noise before ceil so that exact integers stay put
    return max(1, math.ceil(round(10.0 * math.log(arg), 9)))


def _observed_values(obs: ObservationSet, omega) -> SparseCoo:
    if isinstance(omega, SparseCoo):
        return omega
    return project_observed(omega, obs.samples)


def init_m0(obs: ObservationSet, omega0, zeta: float) -> StructuredMatrix:
    """(mn/|Omega_0|) P_Omega_0(M - HT_zeta(M)): observations below the threshold, rescaled."""
    samples = _observed_values(obs, omega0)
    if samples.nnz == 0:
        raise ValueError("initial sample set is empty")
    if zeta < 0:
        raise ValueError("threshold must be >= 0")
    m, n = obs.shape
    kept = samples.subset(np.abs(samples.vals) < zeta)
    return StructuredMatrix.from_sparse(kept, m * n / samples.nnz)


def _threshold_factor(config: SolverConfig, shape) -> float:
    if config.threshold_scale == "eta":
        return config.eta
    big = max(shape)
    return config.mu / (math.sqrt(big) if config.threshold_scale == "sqrt_n" else big)


def _decay(variant: str, t: int) -> float:
    return 0.5 ** (t - 2) if variant == "pg_rmc" else 0.5 ** t


def inner_step(
    state: SolverState,
    obs: ObservationSet,
    omega_qt,
    config: SolverConfig,
    svd_seed: int = 0,
) -> SolverState:
    """One hard-thresholding + projected-gradient step at rank ``state.stage_rank``.

    ``config`` must already carry eta (see :meth:`SolverConfig.resolved`).
    """
    if config.eta is None:
        config = config.resolved(obs)
    samples = _observed_values(obs, omega_qt)
    if samples.nnz == 0:
        raise ValueError("empty sample set for inner step")
    m, n = obs.shape
    k = state.stage_rank
    if not 1 <= k <= min(m, n):
        raise ValueError(f"stage rank {k} outside [1, {min(m, n)}]")
    l = state.l
    lvals = np.zeros(samples.nnz)
    if l.rank:
        lvals = np.einsum("ik,ik->i", l.u[samples.rows] * l.sigma, l.v[samples.cols])
    resid = samples.vals - lvals
    caught = np.abs(resid) >= state.zeta
    s_new = SparseCoo._trusted(
        (m, n), samples.rows[caught], samples.cols[caught], resid[caught]
    )
    # L + S - M on the sample set: zero where thresholded, -resid elsewhere
    grad = np.where(caught, 0.0, -resid)
    scale = config.step_scale * m * n / samples.nnz
    m_struct = StructuredMatrix(
        (m, n),
        lowrank=l if l.rank else None,
        sparse=samples.with_values(grad),
        sparse_coeff=-scale,
    )
    want = min(k + 1, min(m, n))
    start = l.v if l.rank else None
    f = truncated_svd(m_struct, want, config.svd.with_seed(svd_seed), start=start, check=k)
    l_new = f.truncated(k)
    sigma_k = float(f.sigma[k - 1])
    sigma_k1 = float(f.sigma[k]) if want > k else 0.0
    t = state.inner_t
    decay = _decay(config.variant, t)
    zeta = _threshold_factor(config, (m, n)) * (sigma_k1 + decay * sigma_k)
    return SolverState(
        l=l_new,
        s=s_new,
        m_struct=m_struct,
        zeta=zeta,
        stage=state.stage,
        stage_rank=k,
        inner_t=t + 1,
        sigma_k=sigma_k,
        sigma_k1=sigma_k1,
        step_change=frob_error(l_new, l),
    )


def _stage_spectrum(m_struct: StructuredMatrix, count: int, opts: SvdOptions, start=None) -> np.ndarray:
    nonzero = (m_struct.lowrank is not None and m_struct.lowrank.rank > 0) or (
        m_struct.sparse is not None and np.any(m_struct.sparse.vals != 0)
    )
    if not nonzero:
        return np.zeros(count)
    return truncated_svd(m_struct, count, opts, start=start).sigma.copy()


Callback = Callable[[SolverState, IterationRecord], None]


def _solve(obs: ObservationSet, config: SolverConfig, callback: Optional[Callback]):
    m, n = obs.shape
    r = config.target_rank
    if r > min(m, n):
        raise ValueError(f"target rank {r} exceeds min(m, n) = {min(m, n)}")
    if obs.samples.nnz == 0:
        raise ValueError("no observations")
    clock = time.perf_counter()
    cfg = config.resolved(obs)
    rng = np.random.default_rng(cfg.seed)

    def next_seed():
        return int(rng.integers(0, 2 ** 63 - 1))

    T = default_inner_iters(cfg)
    if cfg.variant == "pg_rmc":
        Q = T if cfg.max_stages_override is None else cfg.max_stages_override
        stop_level = cfg.epsilon / (2.0 * cfg.eta * max(m, n))
    else:
        Q = r if cfg.max_stages_override is None else min(r, cfg.max_stages_override)
        stop_level = cfg.epsilon / (2.0 * cfg.eta * min(m, n))

    split = cfg.split_mode is not SplitMode.NO_SPLIT
    if split:
        # one fresh set per inner step (t = 0..T) plus the initial set
        num_sets = Q * (T + 1) + 1
        plan = SplitPlan.for_rate(obs.p, num_sets, cfg.split_mode)
        sets = split_samples(obs, plan.per_set_rate, num_sets, cfg.split_mode, next_seed())
    else:
        sets = None

    def sample_set(q, t):
        if sets is None:
            return obs.samples
        return sets[0] if q == 0 else sets[1 + (q - 1) * (T + 1) + t]

    report = SolverReport(cfg.variant, cfg.epsilon, cfg.eta, cfg.sigma, cfg.mu, T, Q)
    zeta = cfg.eta * cfg.sigma
    omega0 = sample_set(0, 0)
    if omega0.nnz == 0:
        raise ValueError("initial sample set is empty")
    m0 = init_m0(obs, omega0, zeta)
    state = SolverState(LowRankFactors.zeros(m, n), SparseCoo.empty(m, n), m0, zeta)
    count = min(r + 1, min(m, n))
    spectrum = _stage_spectrum(m0, count, cfg.svd.with_seed(next_seed()))
    k = 0
    q = 0
    paused = 0.0
    termination = None
    best_l = state.l
    stage_exit = None

    while termination is None:
        report.stage_spectra.append(spectrum.tolist())
        idx = k if cfg.variant == "pg_rmc" else q
        lead = spectrum[idx] if idx < spectrum.size else 0.0
        if lead <= stop_level:
            termination = "tolerance met at init" if q == 0 else "converged"
            break
        if stage_exit == "stalled" and cfg.variant == "pg_rmc" and k == r:
            # a new stage at the same rank would replay the stalled one
            termination = "stalled"
            break
        if q >= Q:
            termination = "stage cap reached"
            break
        q += 1
        if cfg.variant == "pg_rmc":
            k_new = min(select_stage_rank(spectrum, k), r)
            if k_new <= k and k < r:
                raise SolverError(f"stage rank stuck at {k}", stage=q, partial=state.l)
            k = max(k_new, k)
        else:
            k = q
        report.stage_ranks.append(k)
        state = replace(state, stage=q, stage_rank=k, inner_t=0)
        stage_exit = "inner loop complete"
        for t in range(T + 1):
            zeta_used = state.zeta
            try:
                new_state = inner_step(state, obs, sample_set(q, t), cfg, next_seed())
            except ConvergenceError as exc:
                raise SolverError(
                    f"stage {q}, iteration {t}: {exc}", stage=q, t=t, partial=state.l
                ) from exc
            lsig = new_state.l.sigma
            if not (np.all(np.isfinite(lsig)) and np.isfinite(new_state.zeta)) or (
                lsig.size and lsig[0] > DIVERGENCE_FACTOR * cfg.sigma
            ):
                termination = "diverged"
                stage_exit = "diverged"
                break
            state = new_state
            best_l = state.l
            elapsed = time.perf_counter() - clock - paused
            rec = IterationRecord(
                stage=q, t=t, rank=k, zeta_used=zeta_used, zeta_next=state.zeta,
                sigma_k=state.sigma_k, sigma_k1=state.sigma_k1, support=state.s.nnz,
                step_change=state.step_change, elapsed=elapsed,
            )
            report.records.append(rec)
            if callback is not None:
                before = time.perf_counter()
                callback(state, rec)
                paused += time.perf_counter() - before
            if cfg.time_limit is not None and elapsed > cfg.time_limit:
                termination = "time limit"
                stage_exit = "time limit"
                break
            # a fixed point only counts once the threshold has stopped shrinking
            transient = _decay(cfg.variant, state.inner_t - 1) * state.sigma_k
            settled = transient <= SETTLE_RATIO * state.sigma_k1
            if settled and state.step_change <= cfg.stall_factor * cfg.epsilon:
                stage_exit = "stalled"
                break
        report.stage_exits.append(stage_exit)
        if termination is not None:
            break
        spectrum = _stage_spectrum(
            state.m_struct, count, cfg.svd.with_seed(next_seed()), start=state.l.v
        )

    report.termination = termination
    report.final_zeta = float(state.zeta)
    report.elapsed = time.perf_counter() - clock - paused
    return best_l, report


def pg_rmc(
    obs: ObservationSet, config: SolverConfig, callback: Optional[Callback] = None
) -> Tuple[LowRankFactors, SolverReport]:
    """Rank-doubling stagewise solver.  Returns the final low-rank iterate and a report."""
    if config.variant != "pg_rmc":
        config = replace(config, variant="pg_rmc")
    return _solve(obs, config, callback)


def r_rmc(
    obs: ObservationSet, config: SolverConfig, callback: Optional[Callback] = None
) -> Tuple[LowRankFactors, SolverReport]:
    """Rank-increment stagewise solver: stage q runs at rank q, at most target_rank stages."""
    if config.variant != "r_rmc":
        config = replace(config, variant="r_rmc")
    return _solve(obs, config, callback)


def solve(obs, config, callback=None):
    return (pg_rmc if config.variant == "pg_rmc" else r_rmc)(obs, config, callback)


def matrix_completion(
    obs: ObservationSet, config: SolverConfig, callback: Optional[Callback] = None
) -> Tuple[LowRankFactors, SolverReport]:
    """Plain matrix completion: corruption-free observations run through the same solver."""
    return solve(obs, config, callback)


def residual_threshold(
    mat, l_hat: LowRankFactors, zeta: float, block_rows: int = 256
) -> SparseCoo:
    """HT_zeta(M - L_hat) over every entry of the full matrix, one row block at a time."""
    if isinstance(mat, SparseCoo):
        csr = mat.csr
        get_rows = lambda a, b: csr[a:b].toarray()  # noqa: E731
    else:
        arr = np.asarray(mat, dtype=np.float64)
        get_rows = lambda a, b: arr[a:b]  # noqa: E731
    m, n = l_hat.shape
    us = l_hat.u * l_hat.sigma
    rows, cols, vals = [], [], []
    for a in range(0, m, block_rows):
        b = min(m, a + block_rows)
        res = get_rows(a, b) - us[a:b] @ l_hat.v.T
        ri, ci = np.nonzero(np.abs(res) >= zeta)
        rows.append(ri + a)
        cols.append(ci)
        vals.append(res[ri, ci])
    return SparseCoo._trusted(
        (m, n), np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )


def pass2_default(report: SolverReport) -> float:
    return max(report.final_zeta, report.epsilon)


def rpca(
    mat: Union[np.ndarray, SparseCoo],
    p: float,
    config: SolverConfig,
    two_pass: bool = True,
    seed: Optional[int] = None,
    pass2_threshold: Optional[float] = None,
    callback: Optional[Callback] = None,
) -> Tuple[LowRankFactors, Optional[SparseCoo], SolverReport]:
    """Robust PCA of a fully available matrix by subsampling at rate ``p``.

    Pass 1 samples each entry with probability ``p`` and runs the solver.  Pass 2
    (optional) hard-thresholds the residual M - L_hat over all entries at
    ``pass2_threshold``, by default the larger of the solver's final threshold and
    epsilon (residuals below epsilon are within the accuracy of L_hat itself).
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    shape = mat.shape
    if len(shape) != 2:
        raise ValueError("expected a matrix")
    m, n = shape
    seed = config.seed if seed is None else seed
    idx = bernoulli_sample(m, n, p, np.random.SeedSequence([seed, 1]))
    source = mat if isinstance(mat, SparseCoo) else np.asarray(mat, dtype=np.float64)
    samples = project_observed(idx, source)
    if samples.nnz == 0:
        raise ValueError("subsample is empty; increase p")
    obs = ObservationSet(m, n, samples, float(p))
    l_hat, report = solve(obs, config, callback)
    if not two_pass:
        return l_hat, None, report
    zeta = pass2_default(report) if pass2_threshold is None else pass2_threshold
    return l_hat, residual_threshold(source, l_hat, zeta), report


__all__ = [
    "SolverError", "SolverConfig", "SolverState", "IterationRecord", "SolverReport",
    "default_inner_iters", "init_m0", "inner_step", "pg_rmc", "r_rmc", "solve",
    "matrix_completion", "rpca", "residual_threshold", "pass2_default",
]

"""Synthetic robust matrix completion instances with retained ground truth."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .operators import (
    LowRankFactors,
    ObservationSet,
    SparseCoo,
    incoherence,
    project_observed,
    write_coo,
    write_factors,
    read_coo,
    read_factors,
)
from .sampling import bernoulli_sample


@dataclass(frozen=True)
class InstanceSpec:
    m: int
    n: int
    rank: int
    condition_number: float = 1.0
    corruption_row_col_fraction: float = 0.0
    corruption_value_range: Optional[Tuple[float, float]] = None
    sampling_p: float = 1.0
    seed: int = 0
    sigma_max: float = 1.0
    random_sign: bool = False
    corruption_count: Optional[int] = None

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("dimensions must be positive")
        if not 1 <= self.rank <= min(self.m, self.n):
            raise ValueError(f"rank {self.rank} outside [1, {min(self.m, self.n)}]")
        if self.condition_number < 1:
            raise ValueError("condition number must be >= 1")
        if not 0 <= self.corruption_row_col_fraction <= 1:
            raise ValueError("corruption fraction must lie in [0, 1]")
        if not 0 < self.sampling_p <= 1:
            raise ValueError("sampling_p must lie in (0, 1]")
        lo, hi = self.value_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad corruption value range {(lo, hi)}")

    @property
    def value_range(self) -> Tuple[float, float]:
        # default magnitude band: [r / (2 sqrt(mn)), r / sqrt(mn)]
        if self.corruption_value_range is not None:
            lo, hi = self.corruption_value_range
            return float(lo), float(hi)
        scale = self.rank / np.sqrt(self.m * self.n)
        return 0.5 * scale, scale

    @property
    def row_cap(self) -> int:
        return int(np.floor(self.corruption_row_col_fraction * self.n + 1e-9))

    @property
    def col_cap(self) -> int:
        return int(np.floor(self.corruption_row_col_fraction * self.m + 1e-9))

    def streams(self):
        """Independent generators for (low-rank, corruption support, corruption values, sampling)."""
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(4)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruption_value_range"] = list(self.value_range)
        return d


@dataclass(frozen=True)
class GroundTruth:
    l_star: LowRankFactors
    s_star: SparseCoo
    mu_star: float

    def dense(self) -> np.ndarray:
        """M = L* + S~* as a dense array."""
        out = self.l_star.toarray()
        out[self.s_star.rows, self.s_star.cols] += self.s_star.vals
        return out


def singular_profile(spec: InstanceSpec) -> np.ndarray:
    r = spec.rank
    if r == 1:
        return np.array([spec.sigma_max])
    return spec.sigma_max * spec.condition_number ** (-np.arange(r) / (r - 1.0))


def gen_lowrank(spec: InstanceSpec, rng=None) -> LowRankFactors:
    rng = rng if rng is not None else spec.streams()[0]
    u, _ = np.linalg.qr(rng.standard_normal((spec.m, spec.rank)))
    v, _ = np.linalg.qr(rng.standard_normal((spec.n, spec.rank)))
    return LowRankFactors(u, singular_profile(spec), v)


def gen_corruptions(spec: InstanceSpec, support_rng=None, value_rng=None) -> SparseCoo:
    """Corruption matrix with at most floor(rho n) nonzeros per row and floor(rho m) per column.

    Cells are visited in a uniformly random order and accepted while both caps
    have room.  The default count saturates the caps; for square matrices the
    visit over all cells saturates them exactly.
    """
    m, n = spec.m, spec.n
    row_cap, col_cap = spec.row_cap, spec.col_cap
    feasible = min(m * row_cap, n * col_cap)
    target = feasible if spec.corruption_count is None else int(spec.corruption_count)
    if target > feasible:
        raise ValueError(f"{target} corruptions exceed the cap capacity {feasible}")
    if target == 0:
        return SparseCoo.empty(m, n)
    _, s_rng, v_rng, _ = spec.streams()
    support_rng = support_rng or s_rng
    value_rng = value_rng or v_rng

    order = support_rng.permutation(m * n)
    rows_all, cols_all = np.divmod(order, n)
    row_used = np.zeros(m, dtype=np.int64)
    col_used = np.zeros(n, dtype=np.int64)
    chosen = []
    for i, j, cell in zip(rows_all.tolist(), cols_all.tolist(), order.tolist()):
        if row_used[i] < row_cap and col_used[j] < col_cap:
            row_used[i] += 1
            col_used[j] += 1
            chosen.append(cell)
            if len(chosen) == target:
                break
    cells = np.sort(np.asarray(chosen, dtype=np.int64))
    rows, cols = np.divmod(cells, n)
    lo, hi = spec.value_range
    vals = value_rng.uniform(lo, hi, size=cells.size)
    if spec.random_sign:
        vals *= value_rng.choice([-1.0, 1.0], size=cells.size)
    return SparseCoo._trusted((m, n), rows, cols, vals)


def make_instance(spec: InstanceSpec) -> Tuple[ObservationSet, GroundTruth]:
    l_rng, s_rng, v_rng, o_rng = spec.streams()
    l_star = gen_lowrank(spec, l_rng)
    s_star = gen_corruptions(spec, s_rng, v_rng)
    rows, cols = bernoulli_sample(spec.m, spec.n, spec.sampling_p, o_rng)
    truth = GroundTruth(l_star, s_star, incoherence(l_star))
    obs = ObservationSet(spec.m, spec.n, observe(truth, (rows, cols)), spec.sampling_p)
    return obs, truth


def observe(truth: GroundTruth, indices) -> SparseCoo:
    """Entries of L* + S~* at ``indices``."""
    low = project_observed(indices, truth.l_star)
    keys = truth.s_star.rows * truth.s_star.ncols + truth.s_star.cols
    want = low.rows * low.ncols + low.cols
    pos = np.searchsorted(keys, want)
    pos_c = np.minimum(pos, max(keys.size - 1, 0))
    hit = (pos < keys.size) & (keys[pos_c] == want) if keys.size else np.zeros(want.size, bool)
    vals = low.vals.copy()
    vals[hit] += truth.s_star.vals[pos_c[hit]]
    return low.with_values(vals)


def save_instance(directory, obs: ObservationSet, truth: GroundTruth) -> list:
    os.makedirs(directory, exist_ok=True)
    files = [os.path.join(directory, "obs.txt"), os.path.join(directory, "corruptions.txt")]
    write_coo(files[0], obs.samples)
    write_coo(files[1], truth.s_star)
    files += write_factors(os.path.join(directory, "truth"), truth.l_star)
    return files


def load_truth(directory) -> GroundTruth:
    l_star = read_factors(os.path.join(directory, "truth"))
    s_star = read_coo(os.path.join(directory, "corruptions.txt"))
    return GroundTruth(l_star, s_star, incoherence(l_star))


__all__ = [
    "InstanceSpec", "GroundTruth", "singular_profile", "gen_lowrank", "gen_corruptions",
    "make_instance", "observe", "save_instance", "load_truth",
]

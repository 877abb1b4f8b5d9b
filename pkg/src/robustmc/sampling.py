"""Bernoulli observation sampling and partitioning of observed entries into per-iteration sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import List

import numpy as np

from .operators import IndexSet, ObservationSet, SparseCoo


class SplitMode(str, enum.Enum):
    PAPER_LITERAL = "paper_literal"
    EXACT_COUPLING = "exact_coupling"
    NO_SPLIT = "no_split"

    @classmethod
    def parse(cls, value) -> "SplitMode":
        if isinstance(value, cls):
            return value
        aliases = {"paper": cls.PAPER_LITERAL, "exact": cls.EXACT_COUPLING, "none": cls.NO_SPLIT}
        if value in aliases:
            return aliases[value]
        return cls(value)


@dataclass(frozen=True)
class SplitPlan:
    num_sets: int
    per_set_rate: float
    mode: SplitMode = SplitMode.NO_SPLIT

    def __post_init__(self):
        if self.num_sets < 1:
            raise ValueError("num_sets must be >= 1")
        if not 0.0 < self.per_set_rate <= 1.0:
            raise ValueError("per_set_rate must lie in (0, 1]")

    @classmethod
    def for_rate(cls, p_in: float, num_sets: int, mode) -> "SplitPlan":
        """Per-set rate p with 1 - (1 - p)^num_sets = p_in."""
        mode = SplitMode.parse(mode)
        if mode is SplitMode.NO_SPLIT:
            return cls(num_sets, p_in, mode)
        p = -np.expm1(np.log1p(-p_in) / num_sets) if p_in < 1.0 else 1.0
        return cls(num_sets, float(p), mode)


def bernoulli_sample(m: int, n: int, p: float, seed) -> IndexSet:
    """Each of the m*n indices kept independently with probability p; row-major order."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if p == 1.0:
        r, c = np.divmod(np.arange(m * n, dtype=np.int64), n)
        return r, c
    rng = np.random.default_rng(seed)
    # geometric gaps keep the cost O(p m n) rather than O(m n)
    total = m * n
    expected = p * total
    chunk = int(expected + 6 * np.sqrt(expected) + 16)
    picks = []
    pos = -1
    while True:
        gaps = rng.geometric(p, size=chunk)
        cum = pos + np.cumsum(gaps)
        keep = cum[cum < total]
        picks.append(keep)
        if keep.size < cum.size:
            break
        pos = int(cum[-1])
    flat = np.concatenate(picks).astype(np.int64)
    r, c = np.divmod(flat, n)
    return r, c


def split_weights(t: int) -> List[Fraction]:
    """Subset-size law of the literal splitter: q_r = C(t, r) / (2^t - 1), r = 1..t."""
    if t < 1:
        raise ValueError("t must be >= 1")
    denom = 2 ** t - 1
    return [Fraction(comb(t, r), denom) for r in range(1, t + 1)]


def _memberships_to_sets(samples: SparseCoo, member: np.ndarray) -> List[SparseCoo]:
    return [samples.subset(member[:, i]) for i in range(member.shape[1])]


def split_samples(omega: ObservationSet, p: float, t: int, mode, seed) -> List[SparseCoo]:
    """Partition the observed entries into ``t`` sample sets.

    ``paper_literal``: thin omega to rate 1 - (1 - p)^t (acceptance probability
    clamped to 1), then give each retained entry a subset whose size r is drawn
    with weight C(t, r) / (2^t - 1) and whose members are uniform of that size.

    ``exact_coupling``: same thinning, but the nonempty subset S is drawn with
    probability p^|S| (1 - p)^(t - |S|) / (1 - (1 - p)^t), so every output set is
    Bernoulli(p) over the full index grid and the sets are mutually independent.

    ``no_split``: ``t`` references to the full sample set.
    """
    mode = SplitMode.parse(mode)
    if t < 1:
        raise ValueError("t must be >= 1")
    samples = omega.samples
    if samples.nnz == 0:
        raise ValueError("cannot split an empty observation set")
    if mode is SplitMode.NO_SPLIT:
        return [samples] * t
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")

    rng = np.random.default_rng(seed)
    p_union = -np.expm1(t * np.log1p(-p)) if p < 1.0 else 1.0
    accept = min(1.0, p_union / omega.p)
    kept = samples.subset(rng.random(samples.nnz) < accept) if accept < 1.0 else samples
    count = kept.nnz

    if mode is SplitMode.PAPER_LITERAL:
        weights = np.array([float(q) for q in split_weights(t)])
    else:
        weights = np.array([comb(t, r) * p ** r * (1.0 - p) ** (t - r) for r in range(1, t + 1)])
    sizes = rng.choice(np.arange(1, t + 1), size=count, p=weights / weights.sum())
    # uniform size-r subset: positions whose random rank falls below r
    ranks = np.argsort(np.argsort(rng.random((count, t)), axis=1), axis=1)
    member = ranks < sizes[:, None]
    return _memberships_to_sets(kept, member)


__all__ = ["SplitMode", "SplitPlan", "bernoulli_sample", "split_weights", "split_samples"]

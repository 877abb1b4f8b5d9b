"""Randomized truncated SVD of implicit matrices and the stage rank rule."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .operators import LowRankFactors, StructuredMatrix

ZERO_CUTOFF = 1e-12


class ConvergenceError(RuntimeError):
    """Raised when subspace iteration misses its residual tolerance.

    ``best`` holds the last iterate and ``residual`` its relative residual.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class SvdOptions:
    oversampling: int = 10
    power_iters: int = 2
    tol: float = 1e-10
    max_restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.oversampling < 2:
            raise ValueError("oversampling must be >= 2")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    def with_seed(self, seed: int) -> "SvdOptions":
        return replace(self, seed=int(seed))


def _orth(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y)
    return q


def _sign_fix(u, v):
    # deterministic sign: largest-magnitude entry of each left vector positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def truncated_svd(
    a: StructuredMatrix,
    k: int,
    opts: Optional[SvdOptions] = None,
    start: Optional[np.ndarray] = None,
    check: Optional[int] = None,
) -> LowRankFactors:
    """Top-``k`` singular triplets by randomized subspace iteration.

    ``start`` optionally seeds the leading columns of the test block (e.g. the
    right factor of a previous iterate); the rest is Gaussian.  Accuracy is
    checked through ``||A v_i - s_i u_i|| <= tol * s_1`` on the returned
    triplets; on failure the power-iteration count is doubled and iteration
    continues from the current subspace, up to ``max_restarts`` times.
    ``check`` limits the residual test to the leading triplets (default all k).
    """
    opts = opts or SvdOptions()
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"k={k} outside [1, {min(m, n)}]")
    rng = np.random.default_rng(opts.seed)
    width = min(k + opts.oversampling, min(m, n))
    omega = rng.standard_normal((n, width))
    if start is not None and start.shape[1]:
        c = min(start.shape[1], width)
        omega[:, :c] = start[:, :c]
    q = _orth(a.matmat(omega))
    iters = opts.power_iters
    done = 0
    best = None
    res = np.inf
    for attempt in range(opts.max_restarts + 1):
        for _ in range(iters - done):
            z = _orth(a.rmatmat(q))
            q = _orth(a.matmat(z))
        done = iters
        bt = a.rmatmat(q)  # = B^T with B = Q^T A
        ub, s, vbt = np.linalg.svd(bt.T, full_matrices=False)
        u, v = _sign_fix(q @ ub[:, :k], vbt[:k].T)
        s = s[:k]
        if s[0] == 0.0:
            return LowRankFactors._trusted(u, np.zeros(k), v)
        c = k if check is None else max(1, min(check, k))
        r = a.matmat(v[:, :c]) - u[:, :c] * s[:c]
        res = float(np.linalg.norm(r, axis=0).max() / s[0])
        best = (u, s, v)
        if res <= opts.tol:
            break
        iters *= 2
    else:
        u, s, v = best
        s = np.where(s < ZERO_CUTOFF * s[0], 0.0, s)
        raise ConvergenceError(
            f"truncated SVD residual {res:.3e} > tol {opts.tol:.1e} after "
            f"{opts.max_restarts} restarts ({done} power iterations)",
            best=LowRankFactors._trusted(u, s, v),
            residual=res,
        )
    u, s, v = best
    s = np.where(s < ZERO_CUTOFF * s[0], 0.0, s)
    return LowRankFactors._trusted(u, s, v)


def top_singular_values(
    a: StructuredMatrix, count: int, opts: Optional[SvdOptions] = None, start=None
) -> np.ndarray:
    return truncated_svd(a, count, opts, start=start).sigma.copy()


def spectral_norm_estimate(a: StructuredMatrix, opts: Optional[SvdOptions] = None) -> float:
    """Largest singular value.  Ritz values never exceed the true value."""
    if (a.lowrank is None or a.lowrank.rank == 0 or a.lowrank_coeff == 0) and (
        a.sparse is None or a.sparse.nnz == 0 or a.sparse_coeff == 0
    ):
        return 0.0
    return float(top_singular_values(a, 1, opts)[0])


def select_stage_rank(singvals: Sequence[float], prev_rank: int) -> int:
    """Number of singular values at least half of the ``prev_rank``-th (0-based) one."""
    s = np.asarray(singvals, dtype=np.float64)
    if prev_rank < 0 or s.size < prev_rank + 1:
        raise ValueError(f"need at least {prev_rank + 1} singular values, got {s.size}")
    threshold = s[prev_rank] / 2.0
    return int(np.count_nonzero(s >= threshold))


__all__ = [
    "ConvergenceError", "SvdOptions", "truncated_svd", "top_singular_values",
    "spectral_norm_estimate", "select_stage_rank",
]

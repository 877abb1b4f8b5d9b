"""Robust matrix completion by stagewise projected gradient descent with hard thresholding."""

from .operators import (
    LowRankFactors,
    ObservationSet,
    SparseCoo,
    StructuredMatrix,
    eval_lowrank_entries,
    frob_error,
    hard_threshold,
    incoherence,
    project_observed,
)
from .sampling import SplitMode, bernoulli_sample, split_samples
from .solver import SolverConfig, SolverReport, matrix_completion, pg_rmc, r_rmc, rpca
from .spectral import SvdOptions, truncated_svd

__version__ = "0.1.0"

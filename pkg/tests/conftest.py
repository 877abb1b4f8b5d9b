import numpy as np
import pytest

from robustmc.operators import LowRankFactors, SparseCoo, StructuredMatrix


def random_factors(rng, m, n, k, scale=1.0):
    u, _ = np.linalg.qr(rng.standard_normal((m, k)))
    v, _ = np.linalg.qr(rng.standard_normal((n, k)))
    s = np.sort(rng.uniform(0.1, 1.0, k))[::-1] * scale
    return LowRankFactors(u, s, v)


def random_sparse(rng, m, n, density):
    mask = rng.random((m, n)) < density
    rows, cols = np.nonzero(mask)
    return SparseCoo((m, n), rows, cols, rng.standard_normal(rows.size))


def random_structured(rng, m, n, k=3, density=0.1):
    f = random_factors(rng, m, n, k) if k else None
    s = random_sparse(rng, m, n, density) if density else None
    return StructuredMatrix(
        (m, n), lowrank=f, sparse=s,
        lowrank_coeff=float(rng.uniform(0.5, 2.0)), sparse_coeff=float(rng.uniform(-2.0, 2.0)),
    )


def subspace_angle(a, b):
    """Largest principal angle between the column spans of a and b."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    c = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.arccos(np.clip(c.min(), -1.0, 1.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def record_criterion(number, ok, detail):
    """Log one acceptance line; printed now and again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def record_note(number, detail):
    """Log an informational line that carries no pass/fail verdict."""
    line = f"[INFO] criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE, key=lambda x: (str(x[0]).zfill(4))):
            terminalreporter.write_line(line)

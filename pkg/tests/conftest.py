import numpy as np
import pytest
from hypothesis import settings

from mkrem.linalg import CSRMatrix

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_sparse(rng, n_rows, n_cols, density=0.3):
    A = rng.standard_normal((n_rows, n_cols))
    A[rng.random((n_rows, n_cols)) > density] = 0.0
    return A


def unit_columns(rng, m, S):
    D = rng.standard_normal((m, S))
    return D / np.linalg.norm(D, axis=0)


def exact_recovery_margin(D, support):
    """max over outside atoms of ||pinv(D_S) d_k||_1; below 1 means OMP must find S."""
    P = np.linalg.pinv(D[:, support])
    rest = np.setdiff1d(np.arange(D.shape[1]), support)
    return np.abs(P @ D[:, rest]).sum(axis=0).max()


def planted_problem(rng, m=8, S=12, s=2):
    """Unit-norm D and a y with an s-sparse code on a support OMP is guaranteed to find."""
    while True:
        D = unit_columns(rng, m, S)
        sup = np.sort(rng.choice(S, s, replace=False))
        if exact_recovery_margin(D, sup) < 1.0:
            break
    c = np.zeros(S)
    c[sup] = rng.uniform(1, 2, s) * rng.choice([-1, 1], s)
    return D, D @ c, sup


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sparse_pair(rng):
    """A dense array and its CSR twin."""
    A = random_sparse(rng, 20, 20)
    return A, CSRMatrix.from_dense(A)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import scipy.linalg
import pytest

from mpexp.sparsemat import CsrMatrix


@pytest.fixture(scope="session")
def ref_cache(tmp_path_factory):
    """Private cache for reference solutions so tests never reuse stale files."""
    return tmp_path_factory.mktemp("mpexp-cache")


def random_csr(rng, n, m=None, density=0.3, scale=1.0):
    m = n if m is None else m
    D = rng.standard_normal((n, m)) * scale
    D[rng.random((n, m)) > density] = 0.0
    return CsrMatrix.from_dense(D), D


def stable_dense(rng, n, spread=2.0):
    """Random nonsymmetric matrix with spectrum in the left half-plane."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = -spread * rng.random(n)
    T = np.diag(lam) + np.triu(0.3 * rng.standard_normal((n, n)), 1)
    return Q @ T @ Q.T


def augmented_oracle(t, A, bs):
    """Dense reference for sum_k t^k phi_k(tA) b_k via one exponential of
    the block matrix [[A, B], [0, K]] with B = [b_p ... b_1] and K the shift."""
    A = np.asarray(A, float)
    N, p = A.shape[0], len(bs) - 1
    if p == 0:
        return scipy.linalg.expm(t * A) @ bs[0]
    M = np.zeros((N + p, N + p))
    M[:N, :N] = A
    M[:N, N:] = np.column_stack(bs[:0:-1])
    M[N:N + p - 1, N + 1:] = np.eye(p - 1)
    v = np.concatenate([bs[0], np.zeros(p)])
    v[-1] = 1.0
    return (scipy.linalg.expm(t * M) @ v)[:N]


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import math

import mpmath
import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import augmented_oracle, stable_dense
from mpexp.phikrylov import (FULL, AugmentedOperator, KrylovConvergenceError, KrylovOverflowError,
                             KrylovWorkspace, PrecisionSchedule, arnoldi_residual, dense_expm, iop_arnoldi,
                             krylov_error_estimate, phi_combination)
from mpexp.precision import DOUBLE, HALF, SINGLE
from mpexp.sparsemat import CsrMatrix, MatvecCounters, poisson2d, poisson_rhs

EPS = np.finfo(float).eps


def phi_scalar(k, z):
    """phi_k(z) from the recurrence, evaluated with 50 digits."""
    with mpmath.workdps(50):
        z = mpmath.mpf(z)
        if z == 0:
            return 1 / math.factorial(k)
        val = mpmath.exp(z)
        for j in range(1, k + 1):
            val = (val - mpmath.mpf(1) / math.factorial(j - 1)) / z
        return float(val)


# schedules


def test_schedule_formats():
    s = PrecisionSchedule.mixed(3, 7, "half")
    assert [s.format_for(k).name for k in (1, 3, 4, 7, 8, 100)] == ["double"] * 2 + ["single"] * 2 + ["half"] * 2
    assert PrecisionSchedule.naive("half").format_for(1) is HALF
    assert FULL.is_full and FULL.format_for(10**6) is DOUBLE
    assert not PrecisionSchedule.naive("single").is_full


@pytest.mark.parametrize("m1,m2,mode", [(5, 3, "op"), (-1, 2, "op"), (1, 2, "fast")])
def test_schedule_validation(m1, m2, mode):
    with pytest.raises(ValueError):
        PrecisionSchedule(m1, m2, SINGLE, HALF, mode)


# augmented operator


def test_augmented_apply_matches_dense():
    rng = np.random.default_rng(0)
    A = CsrMatrix.from_dense(rng.standard_normal((5, 5)))
    B = rng.standard_normal((5, 3))
    op = AugmentedOperator(A, B)
    w = rng.standard_normal(8)
    y = op.apply(w)
    np.testing.assert_allclose(y, op.to_dense() @ w, rtol=1e-14, atol=1e-14)
    assert y[5:].tolist() == [w[6], w[7], 0.0]


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_augmentation_identity(p):
    """Column order [b_p, ..., b_1] reproduces sum_k phi_k(A) b_k."""
    rng = np.random.default_rng(p)
    N = 8
    S = rng.standard_normal((N, N))
    A = -(S @ S.T) / N
    lam, Q = np.linalg.eigh(A)
    bs = [rng.standard_normal(N) for _ in range(p + 1)]
    expect = sum(Q @ (np.array([phi_scalar(k, z) for z in lam]) * (Q.T @ b)) for k, b in enumerate(bs))
    np.testing.assert_allclose(augmented_oracle(1.0, A, bs), expect, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("k", range(5))
def test_phi_recurrence(k):
    for z in np.linspace(-5, 5, 21):
        if z != 0:
            assert phi_scalar(k + 1, z) == pytest.approx((phi_scalar(k, z) - phi_scalar(k, 0)) / z, rel=1e-13)


# Arnoldi


def test_arnoldi_zero_operator_happy():
    op = AugmentedOperator(CsrMatrix.from_dense(np.zeros((3, 3))))
    ws = KrylovWorkspace.allocate(3, 5)
    ws.start(np.array([1.0, 0.0, 0.0]))
    c = MatvecCounters()
    iop_arnoldi(op, ws, 5, counters=c)
    assert ws.happy and ws.j == 1 and c.total == 1
    assert ws.H[:1, :1].tolist() == [[0.0]]


def _poisson_basis(schedule, m=30, k=12):
    A = poisson2d(k, 1.0, -1)
    op = AugmentedOperator(A, poisson_rhs(k)[:, None])
    ws = KrylovWorkspace.allocate(op.size, m)
    v = np.zeros(op.size)
    v[-1] = 1.0
    ws.start(v)
    c = MatvecCounters()
    iop_arnoldi(op, ws, m, schedule, c, happy_tol=0.0)
    return op, ws, c


def test_arnoldi_orthogonality_random():
    rng = np.random.default_rng(4)
    for _ in range(5):
        A = CsrMatrix.from_dense(rng.standard_normal((40, 40)))
        op = AugmentedOperator(A, rng.standard_normal((40, 2)))
        ws = KrylovWorkspace.allocate(op.size, 30)
        ws.start(rng.standard_normal(op.size))
        iop_arnoldi(op, ws, 30)
        V = ws.V[:31]
        np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-14)
        for j in range(1, 31):
            assert abs(V[j] @ V[j - 1]) <= 10 * EPS
            if j >= 2:
                assert abs(V[j] @ V[j - 2]) <= 10 * EPS


def test_arnoldi_full_precision_structure():
    op, ws, _ = _poisson_basis(FULL)
    m = ws.j
    V, H = ws.V[: m + 1], ws.H
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-14)
    for j in range(1, m + 1):
        # one Gram-Schmidt pass loses orthogonality in proportion to the
        # cancellation ||A v_{j-1}|| / h_{j,j-1}
        growth = np.linalg.norm(op.apply(V[j - 1])) / H[j, j - 1]
        assert abs(V[j] @ V[j - 1]) <= 10 * EPS * growth
        if j >= 2:
            assert abs(V[j] @ V[j - 2]) <= 10 * EPS * growth
    rows, cols = np.nonzero(H[: m + 1, :m])
    assert np.all(rows >= cols - 1) and np.all(rows <= cols + 1)
    assert arnoldi_residual(op, ws) <= 1e3 * EPS * np.linalg.norm(op.to_dense(), 2)


def test_naive_half_counts_only_half():
    _, ws, c = _poisson_basis(PrecisionSchedule.naive("half"), m=20)
    assert c["half"] == ws.j == 20 and c.total == 20


def test_schedule_monotone_inexactness():
    res = []
    for m1 in (0, 5, 10, 20, 30):
        op, ws, _ = _poisson_basis(PrecisionSchedule.mixed(m1, m1, "half"))
        res.append(arnoldi_residual(op, ws))
    assert all(b <= a for a, b in zip(res, res[1:])), res


def test_overflow_names_precision():
    A = CsrMatrix.from_dense(np.full((3, 3), 6e4))
    op = AugmentedOperator(A)
    ws = KrylovWorkspace.allocate(3, 4)
    ws.start(np.ones(3))
    with pytest.raises(KrylovOverflowError) as info:
        iop_arnoldi(op, ws, 4, PrecisionSchedule.naive("half"))
    assert info.value.fmt == "half"


# dense exponential


def test_dense_expm_examples():
    assert np.array_equal(dense_expm(np.zeros((3, 3))), np.eye(3))
    np.testing.assert_allclose(dense_expm(np.diag([1.0, 2.0])), np.diag([math.e, math.e**2]), rtol=1e-15)
    assert dense_expm(np.array([[0.0, 1.0], [0.0, 0.0]])).tolist() == [[1.0, 1.0], [0.0, 1.0]]
    with pytest.raises(ValueError):
        dense_expm(np.array([[np.nan]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.floats(1e-3, 50.0))
def test_dense_expm_matches_scipy(seed, n, scale):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    M *= scale / np.linalg.norm(M, 1)
    M -= scale * np.eye(n)  # keep the result well scaled
    ref = scipy.linalg.expm(M)
    np.testing.assert_allclose(dense_expm(M), ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


# error estimate


def test_error_estimate_zero_cases():
    F = dense_expm(np.zeros((4, 4)))
    assert krylov_error_estimate(F, 1.0, 0.0) == 0.0


def test_error_estimate_bounds_true_error():
    rng = np.random.default_rng(5)
    A = stable_dense(rng, 20)
    op = AugmentedOperator(CsrMatrix.from_dense(A))
    v = rng.standard_normal(20)
    for m in (4, 6, 8):
        ws = KrylovWorkspace.allocate(20, m)
        ws.start(v)
        iop_arnoldi(op, ws, m)
        avnorm = np.linalg.norm(op.apply(ws.V[m]))
        Hbar = np.zeros((m + 2, m + 2))
        Hbar[:m, :m] = ws.H[:m, :m]
        Hbar[m, m - 1] = ws.H[m, m - 1]
        Hbar[m + 1, m] = 1.0
        for tau in (0.1, 0.5, 1.0):
            F = dense_expm(tau * Hbar)
            est = krylov_error_estimate(F, ws.beta, avnorm, m)
            approx = ws.beta * (F[:m, 0] @ ws.V[:m])
            true = np.linalg.norm(scipy.linalg.expm(tau * A) @ v - approx)
            assert true <= 100 * est + 1e-14


# phi_combination


def test_t_zero_returns_b0():
    A = poisson2d(3, 1.0, -1)
    b0 = np.arange(9.0)
    assert np.array_equal(phi_combination(0.0, A, [b0, np.ones(9)]).w, b0)


def test_zero_operator_cases():
    A = CsrMatrix.from_dense(np.zeros((4, 4)))
    v = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_allclose(phi_combination(1.0, A, [v], tol=1e-12).w, v, rtol=1e-14)
    h = 0.3
    np.testing.assert_allclose(phi_combination(h, A, [np.zeros(4), v], tol=1e-12).w, h * v, rtol=1e-13)
    t = 0.7
    res = phi_combination(t, A, [np.ones(4)] * 5, tol=1e-12)
    np.testing.assert_allclose(res.w, sum(t**k / math.factorial(k) for k in range(5)) * np.ones(4), rtol=1e-13)


def test_all_zero_input():
    A = poisson2d(3, 1.0, -1)
    assert not np.any(phi_combination(1.0, A, [np.zeros(9)]).w)


def test_input_validation():
    A = poisson2d(3, 1.0, -1)
    with pytest.raises(ValueError):
        phi_combination(-1.0, A, [np.ones(9)])
    with pytest.raises(ValueError):
        phi_combination(1.0, A, [np.ones(8)])
    with pytest.raises(ValueError):
        phi_combination(1.0, A, [np.ones(9)], tol=0.0)
    with pytest.raises(ValueError):
        phi_combination(1.0, A, [])


@pytest.mark.parametrize("controller", ["kiops", "fixed"])
def test_random_p4_oracle(controller):
    rng = np.random.default_rng(11)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    A = Q @ np.diag(-2 * rng.random(20)) @ Q.T
    bs = [rng.standard_normal(20) for _ in range(5)]
    got = phi_combination(1.0, CsrMatrix.from_dense(A), bs, tol=1e-12, controller=controller).w
    ref = augmented_oracle(1.0, A, bs)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30), st.integers(0, 4), st.floats(0.1, 3.0))
def test_oracle_property(seed, N, p, t):
    rng = np.random.default_rng(seed)
    A = stable_dense(rng, N)
    bs = [rng.standard_normal(N) for _ in range(p + 1)]
    got = phi_combination(t, CsrMatrix.from_dense(A), bs, tol=1e-12).w
    ref = augmented_oracle(t, A, bs)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-9


@pytest.mark.parametrize("controller", ["kiops", "fixed"])
def test_counter_conservation(controller):
    A = poisson2d(10, 100.0, -1)
    res = phi_combination(1.0, A, [poisson_rhs(10), np.ones(100)], tol=1e-10, controller=controller,
                          schedule=PrecisionSchedule.mixed(4, 8, "half"))
    assert res.counters.total == res.krylov_steps + res.error_matvecs
    if controller == "fixed":
        assert res.krylov_steps == sum(res.basis_sizes)
    else:
        assert sum(res.basis_sizes) <= res.krylov_steps
    assert res.substeps == len(res.basis_sizes)
    assert res.final_m == res.basis_sizes[-1]


def test_deterministic():
    A = poisson2d(12, 200.0, -1)
    b = [poisson_rhs(12)]
    s = PrecisionSchedule.mixed(3, 9, "bfloat16")
    r1 = phi_combination(1.0, A, b, tol=1e-9, schedule=s)
    r2 = phi_combination(1.0, A, b, tol=1e-9, schedule=s)
    assert np.array_equal(r1.w, r2.w) and r1.counters.counts == r2.counters.counts


def test_convergence_failure_reports_estimate():
    A = poisson2d(10, 2500.0, -1)
    with pytest.raises(KrylovConvergenceError) as info:
        phi_combination(1.0, A, [poisson_rhs(10)], tol=1e-12, m_init=2, m_max=2, controller="fixed", max_steps=3)
    assert info.value.error_estimate > 0


def test_poisson_full_precision():
    A = poisson2d(99, 2500.0, -1)
    b = poisson_rhs(99)
    ref = phi_combination(1.0, A, [b], tol=EPS).w
    w = phi_combination(1.0, A, [b], tol=1e-12).w
    assert np.max(np.abs(w - ref)) / np.max(np.abs(ref)) <= 1e-11


@pytest.mark.parametrize("controller", ["kiops", "fixed"])
def test_binary64_overflow_of_exponential(controller):
    A = CsrMatrix.from_dense(np.diag([800.0, -1.0]))
    with pytest.raises(KrylovOverflowError) as info:
        phi_combination(1.0, A, [np.ones(2)], 1e-10, controller=controller)
    assert info.value.fmt == "double"

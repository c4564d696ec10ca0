"""Linear combinations of phi-functions by an incomplete-orthogonalization
Krylov method whose matrix-vector products follow a precision schedule.

Computes ``w = phi_0(tA) b_0 + t phi_1(tA) b_1 + ... + t^p phi_p(tA) b_p``
as the top block of ``exp(t A_aug) [b_0; 0, ..., 0, 1]`` where ``A_aug`` is
the (N+p)-square augmented operator, advancing over substeps in the manner
of KIOPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .precision import DOUBLE, HALF, SINGLE, FloatFormat, get_format
from .sparsemat import MODES, CsrMatrix, MatvecCounters, matvec_chopped

__all__ = [
    "PrecisionSchedule",
    "AugmentedOperator",
    "KrylovWorkspace",
    "KrylovResult",
    "KrylovError",
    "KrylovOverflowError",
    "KrylovConvergenceError",
    "iop_arnoldi",
    "dense_expm",
    "krylov_error_estimate",
    "phi_combination",
    "arnoldi_residual",
]

HAPPY_TOL = 1e-12


class KrylovError(RuntimeError):
    pass


class KrylovOverflowError(KrylovError):
    """A basis vector (or other intermediate) became non-finite; ``fmt`` names
    the precision in use and ``index`` the basis index or a short label."""

    def __init__(self, fmt, index):
        self.fmt = fmt
        self.index = index
        what = f"Krylov basis vector {index}" if isinstance(index, int) else str(index)
        super().__init__(f"non-finite {what} in {fmt} precision")


class KrylovConvergenceError(KrylovError):
    def __init__(self, message, error_estimate=math.nan):
        self.error_estimate = error_estimate
        super().__init__(f"{message} (error estimate {error_estimate:.3e})")


@dataclass(frozen=True)
class PrecisionSchedule:
    """Which precision each Arnoldi product uses.

    The product that creates basis vector ``k`` (1-based) runs in working
    precision while ``k <= m_chop1``, in ``fmt1`` while ``k <= m_chop2`` and
    in ``fmt2`` afterwards. ``inf`` disables a switch.
    """

    m_chop1: float = math.inf
    m_chop2: float = math.inf
    fmt1: FloatFormat = SINGLE
    fmt2: FloatFormat = HALF
    mode: str = "op"

    def __post_init__(self):
        object.__setattr__(self, "fmt1", get_format(self.fmt1))
        object.__setattr__(self, "fmt2", get_format(self.fmt2))
        if not 0 <= self.m_chop1 <= self.m_chop2:
            raise ValueError(f"need 0 <= m_chop1 <= m_chop2, got {self.m_chop1}, {self.m_chop2}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def full(cls) -> "PrecisionSchedule":
        return cls()

    @classmethod
    def naive(cls, fmt, mode="op") -> "PrecisionSchedule":
        """Every product in ``fmt``."""
        fmt = get_format(fmt)
        return cls(0, 0, fmt, fmt, mode)

    @classmethod
    def mixed(cls, m_chop1, m_chop2, fmt2, fmt1=SINGLE, mode="op") -> "PrecisionSchedule":
        return cls(m_chop1, m_chop2, fmt1, fmt2, mode)

    def format_for(self, k: int) -> FloatFormat:
        """Precision of the product producing basis vector ``k`` (1-based)."""
        if k > self.m_chop2:
            return self.fmt2
        if k > self.m_chop1:
            return self.fmt1
        return DOUBLE

    @property
    def is_full(self) -> bool:
        return self.format_for(10**9).is_identity


FULL = PrecisionSchedule()


class AugmentedOperator:
    """``[[A, B], [0, K]]`` with ``K`` the upward shift on the p-dim tail.

    ``B`` holds the columns ``[b_p, ..., b_1]`` (already scaled).
    """

    def __init__(self, A: CsrMatrix, B=None):
        self.A = A
        self.N = A.n_rows
        if A.n_rows != A.n_cols:
            raise ValueError("operator must be square")
        B = np.zeros((self.N, 0)) if B is None else np.asarray(B, dtype=np.float64).reshape(self.N, -1)
        self.B = B
        self.p = B.shape[1]
        if self.p:
            self.top = CsrMatrix.from_scipy(sp.hstack([A.scipy, sp.csr_matrix(B)], format="csr"))
        else:
            self.top = A

    @property
    def size(self) -> int:
        return self.N + self.p

    def apply(self, w, fmt: FloatFormat = DOUBLE, mode: str = "op", counters: MatvecCounters | None = None):
        N, p = self.N, self.p
        out = np.empty(N + p)
        out[:N] = matvec_chopped(self.top, w, fmt, mode, counters)
        if p:
            out[N : N + p - 1] = w[N + 1 : N + p]
            out[N + p - 1] = 0.0
        return out

    def to_dense(self) -> np.ndarray:
        N, p = self.N, self.p
        M = np.zeros((N + p, N + p))
        M[:N, :N] = self.A.to_dense()
        M[:N, N:] = self.B
        if p > 1:
            M[N : N + p - 1, N + 1 : N + p] = np.eye(p - 1)
        return M


@dataclass
class KrylovWorkspace:
    """Arnoldi state. ``V`` stores basis vectors as rows."""

    V: np.ndarray
    H: np.ndarray
    j: int = 0
    beta: float = 0.0
    happy: bool = False

    @classmethod
    def allocate(cls, size: int, m_max: int) -> "KrylovWorkspace":
        return cls(np.zeros((m_max + 1, size)), np.zeros((m_max + 1, m_max + 1)))

    def start(self, v):
        """Reset and load the (unnormalised) starting vector."""
        self.H[:] = 0.0
        self.j = 0
        self.happy = False
        self.beta = float(np.linalg.norm(v))
        self.V[0] = v / self.beta

    @property
    def m_max(self) -> int:
        return self.V.shape[0] - 1


def iop_arnoldi(op: AugmentedOperator, ws: KrylovWorkspace, m: int, schedule: PrecisionSchedule = FULL,
                counters: MatvecCounters | None = None, happy_tol: float = HAPPY_TOL) -> KrylovWorkspace:
    """Extend the basis in ``ws`` until it holds ``m`` vectors.

    Each new vector is orthogonalised (modified Gram-Schmidt) against the
    two most recent ones only. Stops early on happy breakdown, leaving the
    unnormalised residual in ``V[j]``.
    """
    if m > ws.m_max:
        raise ValueError(f"m={m} exceeds workspace capacity {ws.m_max}")
    V, H = ws.V, ws.H
    while ws.j < m:
        ws.j += 1
        j = ws.j
        fmt = schedule.format_for(j + 1)
        V[j] = op.apply(V[j - 1], fmt, schedule.mode, counters)
        if not np.all(np.isfinite(V[j])):
            raise KrylovOverflowError(fmt.name, j)
        for i in range(max(0, j - 2), j):
            H[i, j - 1] = V[i] @ V[j]
            V[j] -= H[i, j - 1] * V[i]
        s = float(np.linalg.norm(V[j]))
        if s < happy_tol:
            ws.happy = True
            break
        H[j, j - 1] = s
        V[j] /= s
    return ws


def arnoldi_residual(op: AugmentedOperator, ws: KrylovWorkspace) -> float:
    """``||A_aug V_m - V_m H_m - h_{m+1,m} v_{m+1} e_m^T||_F`` in binary64."""
    m = ws.j
    A = op.to_dense()
    Vm = ws.V[:m].T
    R = A @ Vm - Vm @ ws.H[:m, :m]
    if not ws.happy:
        R[:, m - 1] -= ws.H[m, m - 1] * ws.V[m]
    return float(np.linalg.norm(R))


# Pade approximants and backward-error thresholds for the scaling and
# squaring exponential (Higham, 2005).
_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1, 7: 9.504178996162932e-1,
          9: 2.097847961257068e0, 13: 5.371920351148152e0}


def _pade_coeffs(m):
    f = math.factorial
    return [f(2 * m - k) * f(m) / (f(2 * m) * f(k) * f(m - k)) for k in range(m + 1)]


_PADE = {m: _pade_coeffs(m) for m in _THETA}


def _pade_uv(A, m):
    b = _PADE[m]
    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
        return U, V
    powers = [ident, A2]
    while len(powers) <= m // 2:
        powers.append(powers[-1] @ A2)
    U = A @ sum(b[2 * k + 1] * powers[k] for k in range(m // 2 + 1))
    V = sum(b[2 * k] * powers[k] for k in range(m // 2 + 1))
    return U, V


def dense_expm(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with Pade approximants.

    The lowest degree in {3, 5, 7, 9, 13} whose backward-error threshold
    covers ``||M||_1`` is used; otherwise ``M`` is scaled by a power of two
    into the degree-13 region and the result squared back.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("dense_expm needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("dense_expm: non-finite entries")
    if M.shape[0] == 0:
        return np.zeros((0, 0))
    norm = np.linalg.norm(M, 1)
    for m in (3, 5, 7, 9):
        if norm <= _THETA[m]:
            U, V = _pade_uv(M, m)
            return np.linalg.solve(V - U, V + U)
    s = max(0, int(math.ceil(math.log2(norm / _THETA[13])))) if norm > 0 else 0
    U, V = _pade_uv(M / 2.0**s, 13)
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def krylov_error_estimate(F, beta: float, h_next_norm: float, m: int | None = None) -> float:
    """Local error of a Krylov exponential step from the error-augmented Hessenberg.

    ``F`` is ``exp(tau * Hbar)`` with ``Hbar`` of size ``m + 2`` (``Hbar[m, m-1]
    = h_{m+1,m}`` and ``Hbar[m+1, m] = 1``); ``h_next_norm`` is
    ``||A v_{m+1}||``. Uses the three-case rule of Expokit.
    """
    F = np.asarray(F)
    if m is None:
        m = F.shape[0] - 2
    err1 = beta * abs(F[m, 0])
    err2 = beta * abs(F[m + 1, 0]) * h_next_norm
    if err1 > 10.0 * err2:
        return float(err2)
    if err1 > err2:
        return float(err1 * err2 / (err1 - err2))
    return float(err1)


@dataclass
class KrylovResult:
    """Output of :func:`phi_combination`.

    ``counters`` covers every product performed, including the ones spent
    on rejected substeps; ``krylov_steps`` counts Arnoldi products only and
    ``basis_sizes`` lists the final size of every basis built.
    """

    w: np.ndarray
    counters: MatvecCounters
    substeps: int = 0
    rejections: int = 0
    final_m: int = 0
    krylov_steps: int = 0
    error_matvecs: int = 0
    error_estimate: float = 0.0
    basis_sizes: list = field(default_factory=list)


def _prepare(A: CsrMatrix, bs):
    bs = [np.asarray(b, dtype=np.float64) for b in bs]
    if not bs:
        raise ValueError("need at least b_0")
    N = A.n_rows
    for k, b in enumerate(bs):
        if b.shape != (N,):
            raise ValueError(f"b_{k} has shape {b.shape}, expected ({N},)")
    # Trailing zero vectors contribute nothing; dropping them keeps the
    # augmented system minimal.
    while len(bs) > 1 and not np.any(bs[-1]):
        bs.pop()
    return bs


def _balance(bs):
    # Power-of-two scaling of the tail so the B columns have unit-order
    # 1-norm; exact in binary arithmetic.
    norm = max((float(np.sum(np.abs(b))) for b in bs[1:]), default=0.0)
    if len(bs) > 1 and norm > 0:
        ex = math.ceil(math.log2(norm))
        return 2.0**-ex, 2.0**ex
    return 1.0, 1.0


def _tail(p, tau, mu):
    # exp(tau K) e_p scaled by mu: [tau^{p-1}/(p-1)!, ..., tau, 1].
    return np.array([tau ** (p - 1 - k) / math.factorial(p - 1 - k) for k in range(p)]) * mu


def phi_combination(t: float, A: CsrMatrix, b, tol: float = 1e-7, m_init: int = 10,
                    schedule: PrecisionSchedule = FULL, *, m_min: int = 10, m_max: int = 128,
                    controller: str = "kiops", happy_tol: float = HAPPY_TOL,
                    max_steps: int = 100_000, counters: MatvecCounters | None = None) -> KrylovResult:
    """Evaluate ``sum_k t^k phi_k(t A) b_k`` for ``b = [b_0, ..., b_p]``.

    ``controller="kiops"`` adapts both the substep and the basis size as
    KIOPS does (basis between ``m_min`` and ``m_max``, starting at
    ``m_init``) with its phi_1-based error estimate. ``controller="fixed"``
    keeps the basis size at ``m_init`` and only adapts the substep, using
    :func:`krylov_error_estimate`. ``tol`` bounds the absolute error over
    the whole interval.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if controller not in ("kiops", "fixed"):
        raise ValueError(f"unknown controller {controller!r}")
    counters = MatvecCounters() if counters is None else counters
    bs = _prepare(A, b)
    N = A.n_rows
    if t == 0:
        return KrylovResult(bs[0].copy(), counters)
    if len(bs) == 1 and not np.any(bs[0]):
        return KrylovResult(np.zeros(N), counters)

    p = len(bs) - 1
    if p == 0:
        bs.append(np.zeros(N))
        p = 1
    nu, mu = _balance(bs)
    B = nu * np.column_stack(bs[:0:-1])
    op = AugmentedOperator(A, B)
    run = _kiops if controller == "kiops" else _fixed
    return run(op, bs[0], t, tol, m_init, m_min, m_max, schedule, happy_tol, max_steps, counters, mu)


def _projected_expm(M):
    # overflow here means exp(tA) itself exceeds binary64
    with np.errstate(over="ignore", invalid="ignore"):
        F = dense_expm(M)
    if not np.all(np.isfinite(F)):
        raise KrylovOverflowError("double", "projected exponential")
    return F


def _start(ws, w, p, tau_now, mu, N):
    v = np.empty(N + p)
    v[:N] = w
    v[N:] = _tail(p, tau_now, mu)
    ws.start(v)


def _kiops(op, w0, tau_end, tol, m_init, m_min, m_max, schedule, happy_tol, max_steps, counters, mu):
    N, p = op.N, op.p
    m_min = min(m_min, m_max)
    m = max(m_min, min(m_init, m_max))
    ws = KrylovWorkspace.allocate(N + p, m_max)
    V, H = ws.V, ws.H
    res = KrylovResult(w0.copy(), counters)
    w = res.w

    if tau_end > 1:
        gamma, gamma_mmax = 0.2, 0.1
    else:
        gamma, gamma_mmax = 0.9, 0.6
    delta = 1.4

    tau_now = 0.0
    tau = tau_end
    ireject = 0
    oldm, oldtau, omega = -1, math.nan, math.nan
    orderold = kestold = True
    order, kest = 1.0, 2.0
    iterations = 0
    err = math.nan

    while tau_now < tau_end:
        iterations += 1
        if iterations > max_steps:
            raise KrylovConvergenceError("substep limit reached", err)
        if ws.j == 0:
            _start(ws, w, p, tau_now, mu, N)

        j_before = ws.j
        iop_arnoldi(op, ws, m, schedule, counters, happy_tol)
        res.krylov_steps += ws.j - j_before
        j = ws.j

        H[0, j] = 1.0
        nrm = H[j, j - 1]
        H[j, j - 1] = 0.0
        F = _projected_expm(tau * H[: j + 1, : j + 1])
        H[j, j - 1] = nrm

        if ws.happy:
            omega = 0.0
            err = 0.0
            tau_new = min(tau_end - (tau_now + tau), tau)
            m_new = m
        else:
            err = abs(ws.beta * nrm * F[j - 1, j])
            oldomega = omega
            omega = tau_end * err / (tau * tol)

            if m == oldm and tau != oldtau and ireject >= 1 and omega > 0 and oldomega > 0:
                order = max(1.0, math.log(omega / oldomega) / math.log(tau / oldtau))
                orderold = False
            elif orderold or ireject == 0:
                orderold = True
                order = j / 4
            else:
                orderold = True

            if m != oldm and tau == oldtau and ireject >= 1 and omega > 0 and oldomega > 0:
                kest = max(1.1, (omega / oldomega) ** (1 / (oldm - m)))
                kestold = False
            elif kestold or ireject == 0:
                kestold = True
                kest = 2.0
            else:
                kestold = True

            remaining = tau_end - tau_now if omega > delta else tau_end - (tau_now + tau)
            same_tau = min(remaining, tau)
            if omega > 0:
                tau_opt = tau * (gamma / omega) ** (1 / order)
                m_opt = math.ceil(j + math.log(omega / gamma) / math.log(kest))
            else:
                tau_opt, m_opt = 5 * tau, m_min
            tau_opt = min(remaining, max(tau / 5, min(5 * tau, tau_opt)))
            m_opt = max(m_min, min(m_max, max(math.floor(3 / 4 * m), min(m_opt, math.ceil(4 / 3 * m)))))

            if j == m_max:
                if omega > delta:
                    m_new = j
                    tau_new = tau * (gamma_mmax / omega) ** (1 / order)
                    tau_new = min(tau_end - tau_now, max(tau / 5, tau_new))
                else:
                    tau_new, m_new = tau_opt, m
            else:
                m_new, tau_new = m_opt, same_tau

        if omega <= delta:
            res.rejections += ireject
            res.substeps += 1
            res.basis_sizes.append(j)
            res.final_m = j
            w[:] = ws.beta * (F[:j, 0] @ V[:j, :N])
            tau_now += tau
            res.error_estimate += err
            ws.j = 0
            ireject = 0
        else:
            ireject += 1
            H[0, j] = 0.0
            if ws.happy:
                ws.happy = False

        oldtau, tau = tau, tau_new
        oldm, m = m, m_new
        if tau <= 0 and tau_now < tau_end:
            raise KrylovConvergenceError("step size collapsed", err)
    return res


def _fixed(op, w0, tau_end, tol, m_init, m_min, m_max, schedule, happy_tol, max_steps, counters, mu):
    N, p = op.N, op.p
    m = max(1, min(m_init, m_max))
    ws = KrylovWorkspace.allocate(N + p, m)
    res = KrylovResult(w0.copy(), counters)
    w = res.w
    tau_now = 0.0
    tau = tau_end
    iterations = 0
    rejected = 0
    err = math.nan

    while tau_now < tau_end:
        _start(ws, w, p, tau_now, mu, N)
        iop_arnoldi(op, ws, m, schedule, counters, happy_tol)
        j = ws.j
        res.krylov_steps += j
        res.basis_sizes.append(j)
        if ws.happy:
            avnorm = 0.0
        else:
            fmt = schedule.format_for(j + 2)
            avnorm = float(np.linalg.norm(op.apply(ws.V[j], fmt, schedule.mode, counters)))
            res.error_matvecs += 1
        Hbar = np.zeros((j + 2, j + 2))
        Hbar[:j, :j] = ws.H[:j, :j]
        if not ws.happy:
            Hbar[j, j - 1] = ws.H[j, j - 1]
            Hbar[j + 1, j] = 1.0

        while True:
            iterations += 1
            if iterations > max_steps:
                raise KrylovConvergenceError("substep limit reached", err)
            tau = min(tau, tau_end - tau_now)
            F = _projected_expm(tau * Hbar)
            err = 0.0 if ws.happy else krylov_error_estimate(F, ws.beta, avnorm, j)
            if err <= 1.2 * (tau / tau_end) * tol:
                break
            rejected += 1
            tau = _fixed_step(tau, tau_end, tol, err, j)
            if tau <= tau_end * 1e-15:
                raise KrylovConvergenceError("step size collapsed", err)

        w[:] = ws.beta * (F[:j, 0] @ ws.V[:j, :N])
        tau_now += tau
        res.substeps += 1
        res.final_m = j
        res.error_estimate += err
        tau = _fixed_step(tau, tau_end, tol, err, j)
    res.rejections = rejected
    return res


def _fixed_step(tau, tau_end, tol, err, m):
    if err == 0:
        return 5 * tau
    new = 0.9 * tau * ((tau / tau_end) * tol / err) ** (1 / m)
    return min(max(new, tau / 5), 5 * tau)

"""Exponential Rosenbrock-Euler (ERE) and its reformulation (RERE).

ERE:   u_{n+1} = u_n + h phi_1(h J) f(u_n)
RERE:  u_{n+1} = u_n + h gamma f(u_n) + lp(h psi(h J~, gamma) f(u_n)),
       psi(z, gamma) = (1 - gamma) phi_1(z) + gamma z phi_2(z)

Everything inside ``lp`` (the rounded Jacobian ``J~`` and the Krylov
phi-evaluation) may run in reduced precision; the remaining vector updates
stay in binary64.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .phikrylov import FULL, KrylovOverflowError, KrylovResult, PrecisionSchedule, phi_combination
from .precision import DOUBLE, PRESETS, FloatFormat, get_format, round_vec
from .sparsemat import CsrMatrix, MatvecCounters, matvec_chopped

__all__ = [
    "OdeSystem",
    "IntegratorConfig",
    "RunStats",
    "IntegrationError",
    "ode_system",
    "ere_step",
    "rere_step",
    "gamma_optimal",
    "gamma_estimate",
    "phi1_scalar",
    "mu2_upper_bound",
    "integrate",
    "effective_matvecs",
    "rel_linf_error",
    "abs_l2_error",
]


@dataclass
class OdeSystem:
    N: int
    rhs: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], CsrMatrix]
    mu2_bound: Optional[Callable[[np.ndarray], float]] = None


def ode_system(problem) -> OdeSystem:
    """Wrap an :class:`~mpexp.problems.AdrProblem` as an :class:`OdeSystem`."""
    from .problems import adr_jacobian, adr_rhs

    return OdeSystem(problem.N, lambda u: adr_rhs(problem, u), lambda u: adr_jacobian(problem, u))


GAMMA_MODES = ("one", "zero", "estimate", "optimal")


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "RERE"
    steps: int = 100
    t0: float = 0.0
    tf: float = 0.3
    krylov_tol: float = 1e-12
    schedule: PrecisionSchedule = FULL
    jacobian_format: FloatFormat = DOUBLE
    gamma_mode: str = "optimal"
    m_init: int = 10
    m_max: int = 128
    controller: str = "kiops"

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.upper())
        object.__setattr__(self, "jacobian_format", get_format(self.jacobian_format))
        if self.method not in ("ERE", "RERE"):
            raise ValueError(f"method must be ERE or RERE, got {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.tf > self.t0:
            raise ValueError("need tf > t0")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")

    @property
    def h(self) -> float:
        return (self.tf - self.t0) / self.steps


@dataclass
class RunStats:
    gammas: list = field(default_factory=list)
    counters: MatvecCounters = field(default_factory=MatvecCounters)
    substeps: int = 0
    rejections: int = 0
    phi_calls: int = 0
    wall_time: float = 0.0

    def record(self, res: KrylovResult):
        self.substeps += res.substeps
        self.rejections += res.rejections
        self.phi_calls += 1


class IntegrationError(RuntimeError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step} failed: {cause}")


def _defaults(cfg):
    return cfg if cfg is not None else IntegratorConfig()


def _lowered_jacobian(sys: OdeSystem, u, fmt: FloatFormat) -> CsrMatrix:
    J = sys.jacobian(u)
    if fmt.is_identity:
        return J
    return J.with_values(round_vec(J.values, fmt))


def _phi(h, J, bs, cfg, stats):
    counters = stats.counters if stats is not None else None
    res = phi_combination(h, J, bs, cfg.krylov_tol, cfg.m_init, cfg.schedule,
                          m_max=cfg.m_max, controller=cfg.controller, counters=counters)
    if stats is not None:
        stats.record(res)
    return res


def ere_step(u, h, sys: OdeSystem, cfg: IntegratorConfig | None = None, stats: RunStats | None = None,
             *, f=None, J=None) -> np.ndarray:
    """One ERE step ``u + h phi_1(h J~) f(u)``."""
    if h <= 0:
        raise ValueError("h must be positive")
    cfg = _defaults(cfg)
    f = sys.rhs(u) if f is None else f
    J = _lowered_jacobian(sys, u, cfg.jacobian_format) if J is None else J
    res = _phi(h, J, [np.zeros_like(f), round_vec(f, cfg.jacobian_format)], cfg, stats)
    return u + res.w


def rere_step(u, h, gamma, sys: OdeSystem, cfg: IntegratorConfig | None = None, stats: RunStats | None = None,
              *, f=None, J=None) -> np.ndarray:
    """One RERE step with a given ``gamma``.

    ``h psi(h J~, gamma) f`` is evaluated as the single combination
    ``h phi_1(h J~) (1 - gamma) f + h^2 phi_2(h J~) gamma J~ f``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not math.isfinite(gamma):
        raise ValueError("gamma must be finite")
    cfg = _defaults(cfg)
    f = sys.rhs(u) if f is None else f
    J = _lowered_jacobian(sys, u, cfg.jacobian_format) if J is None else J
    lp = cfg.jacobian_format
    bs = [np.zeros_like(f), round_vec((1.0 - gamma) * f, lp)]
    if gamma != 0:
        counters = stats.counters if stats is not None else None
        Jf = matvec_chopped(J, f, lp, cfg.schedule.mode, counters)
        b2 = round_vec(gamma * Jf, lp)
        if not np.all(np.isfinite(b2)):
            raise KrylovOverflowError(lp.name, "gamma J f")
        bs.append(b2)
    res = _phi(h, J, bs, cfg, stats)
    return (u + (h * gamma) * f) + res.w


def gamma_optimal(f_val, phi1_f) -> float:
    """Least-squares ``gamma`` minimising ``||phi_1(hJ) f - gamma f||_2``."""
    f_val = np.asarray(f_val)
    nrm2 = float(f_val @ f_val)
    if nrm2 == 0:
        return 1.0
    return float(f_val @ np.asarray(phi1_f)) / nrm2


def phi1_scalar(z: float) -> float:
    """``(e^z - 1) / z`` without cancellation near 0."""
    if z == -math.inf:
        return 0.0
    if abs(z) < 1e-2:
        # Taylor series; ten terms is far beyond double precision here
        term, total = 1.0, 1.0
        for k in range(2, 12):
            term *= z / k
            total += term
        return total
    return math.expm1(z) / z


def gamma_estimate(h: float, mu2: float) -> float:
    """Upper bound ``phi_1(h mu_2(J))`` for the optimal ``gamma``."""
    return phi1_scalar(h * mu2)


def mu2_upper_bound(J: CsrMatrix) -> float:
    """Gershgorin bound on the largest eigenvalue of ``(J + J^T) / 2``."""
    if J.n_rows != J.n_cols:
        raise ValueError("J must be square")
    S = ((J.scipy + J.scipy.T) * 0.5).tocsr()
    d = S.diagonal()
    radius = abs(S) @ np.ones(S.shape[0]) - np.abs(d)
    return float(np.max(d + radius))


def integrate(sys: OdeSystem, u0, cfg: IntegratorConfig):
    """Fixed-step integration from ``cfg.t0`` to ``cfg.tf``; returns ``(u, RunStats)``."""
    stats = RunStats()
    h = cfg.h
    u = np.array(u0, dtype=np.float64, copy=True)
    start = time.perf_counter()
    for n in range(cfg.steps):
        try:
            u = _step(u, h, sys, cfg, stats)
        except Exception as exc:
            raise IntegrationError(n, exc) from exc
    stats.wall_time = time.perf_counter() - start
    return u, stats


def _step(u, h, sys, cfg, stats):
    f = sys.rhs(u)
    J = _lowered_jacobian(sys, u, cfg.jacobian_format)
    if cfg.method == "ERE":
        return ere_step(u, h, sys, cfg, stats, f=f, J=J)
    mode = cfg.gamma_mode
    if mode == "one":
        gamma = 1.0
    elif mode == "zero":
        gamma = 0.0
    elif mode == "estimate":
        mu2 = sys.mu2_bound(u) if sys.mu2_bound is not None else mu2_upper_bound(J)
        gamma = gamma_estimate(h, mu2)
    else:
        res = _phi(h, J, [np.zeros_like(f), f], cfg, stats)
        gamma = gamma_optimal(f, res.w / h)
    stats.gammas.append(gamma)
    return rere_step(u, h, gamma, sys, cfg, stats, f=f, J=J)


def _bandwidth_class(name: str) -> str:
    fmt = PRESETS.get(name)
    if fmt is None:
        raise ValueError(f"unknown format {name!r} in counters")
    if fmt.is_identity:
        return "double"
    if fmt.exponent_bits == 8 and fmt.significand_bits > 8:
        # single and tf32 both move 32-bit words
        return "single"
    return "half"


def effective_matvecs(c, a: float = 2.0, b: float = 4.0) -> float:
    """``mv_double + mv_single / a + mv_half / b``.

    ``c`` is a :class:`MatvecCounters` or a mapping of format name to count;
    tf32 is counted as single and bfloat16 as half.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    counts = c.counts if isinstance(c, MatvecCounters) else dict(c)
    weight = {"double": 1.0, "single": 1.0 / a, "half": 1.0 / b}
    return float(sum(n * weight[_bandwidth_class(get_format(k).name)] for k, n in counts.items()))


def rel_linf_error(u, u_ref) -> float:
    u, u_ref = np.asarray(u), np.asarray(u_ref)
    if u.shape != u_ref.shape:
        raise ValueError("shape mismatch")
    scale = np.max(np.abs(u_ref))
    if scale == 0:
        raise ValueError("relative error against a zero reference")
    return float(np.max(np.abs(u - u_ref)) / scale)


def abs_l2_error(u, u_ref) -> float:
    u, u_ref = np.asarray(u), np.asarray(u_ref)
    if u.shape != u_ref.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm(u - u_ref))

"""Advection-diffusion-reaction test problem on the unit square.

    u_t = eps (u_xx + u_yy) - alpha (u_x + u_y) + rho u (u - 1/2)(1 - u)
    u(0, x, y) = 0.3 + 256 (x (1 - x) y (1 - y))^2

discretised with second-order central differences on an ``nx``-by-``nx``
node grid that includes the boundary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparsemat import CsrMatrix

__all__ = ["AdrProblem", "adr_rhs", "adr_jacobian", "adr_initial", "reference_solution", "default_cache_dir"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdrProblem:
    """Grid and coefficients. ``nx`` counts nodes per axis including the boundary.

    ``bc="neumann"`` closes the stencil with mirrored ghost nodes;
    ``bc="dirichlet"`` freezes the boundary nodes at their initial value 0.3.
    """

    nx: int = 21
    epsilon: float = 0.05
    alpha: float = -1.0
    rho: float = 1.0
    bc: str = "neumann"

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError("nx must be at least 3")
        if self.bc not in ("neumann", "dirichlet"):
            raise ValueError(f"bc must be 'neumann' or 'dirichlet', got {self.bc!r}")

    @property
    def ny(self) -> int:
        return self.nx

    @property
    def dx(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def N(self) -> int:
        return self.nx * self.ny

    @property
    def grid(self):
        x = np.linspace(0.0, 1.0, self.nx)
        # node (i, j) lives at index j * nx + i
        X, Y = np.meshgrid(x, x)
        return X.ravel(), Y.ravel()

    @cached_property
    def boundary(self) -> np.ndarray:
        i = np.arange(self.N) % self.nx
        j = np.arange(self.N) // self.nx
        return (i == 0) | (j == 0) | (i == self.nx - 1) | (j == self.nx - 1)

    @cached_property
    def linear_operator(self) -> CsrMatrix:
        """Diffusion plus advection part of the Jacobian."""
        n, h = self.nx, self.dx
        d = self.epsilon / h**2
        c = -self.alpha / (2 * h)
        rows, cols, vals = [], [], []
        idx = np.arange(self.N)
        i, j = idx % n, idx // n

        def mirror(k):
            k = np.where(k < 0, -k, k)
            return np.where(k > n - 1, 2 * (n - 1) - k, k)

        rows.append(idx)
        cols.append(idx)
        vals.append(np.full(self.N, -4 * d))
        for di, dj, adv in ((1, 0, c), (-1, 0, -c), (0, 1, c), (0, -1, -c)):
            nb = mirror(j + dj) * n + mirror(i + di)
            rows.append(idx)
            cols.append(nb)
            vals.append(np.full(self.N, d + adv))
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        if self.bc == "dirichlet":
            vals = np.where(self.boundary[rows], 0.0, vals)
        L = sp.coo_matrix((vals, (rows, cols)), shape=(self.N, self.N)).tocsr()
        L.sum_duplicates()
        L.sort_indices()
        # drop cancelled entries but keep the diagonal as the reaction slot
        L = L.tocoo()
        keep = (L.data != 0) | (L.row == L.col)
        L = sp.csr_matrix((L.data[keep], (L.row[keep], L.col[keep])), shape=(self.N, self.N))
        L.sort_indices()
        return CsrMatrix(self.N, self.N, L.indptr, L.indices, L.data)

    @cached_property
    def _diag_pos(self) -> np.ndarray:
        L = self.linear_operator
        rows = np.repeat(np.arange(self.N), L.row_nnz)
        pos = np.flatnonzero(rows == L.col_idx)
        assert len(pos) == self.N
        return pos

    def key(self) -> dict:
        return asdict(self)


def _check(p: AdrProblem, u):
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (p.N,):
        raise ValueError(f"state has shape {u.shape}, expected ({p.N},)")
    return u


def _reaction(p, u):
    r = p.rho * u * (u - 0.5) * (1.0 - u)
    if p.bc == "dirichlet":
        r = np.where(p.boundary, 0.0, r)
    return r


def adr_rhs(p: AdrProblem, u) -> np.ndarray:
    u = _check(p, u)
    return p.linear_operator.scipy @ u + _reaction(p, u)


def adr_jacobian(p: AdrProblem, u) -> CsrMatrix:
    """Constant stencil part plus the diagonal reaction derivative."""
    u = _check(p, u)
    dr = p.rho * (-3 * u**2 + 3 * u - 0.5)
    if p.bc == "dirichlet":
        dr = np.where(p.boundary, 0.0, dr)
    L = p.linear_operator
    vals = L.values.copy()
    vals[p._diag_pos] += dr
    return L.with_values(vals)


def adr_initial(p: AdrProblem) -> np.ndarray:
    x, y = p.grid
    return 0.3 + 256 * (x * (1 - x) * y * (1 - y)) ** 2


def default_cache_dir() -> Path:
    return Path(os.environ.get("MPEXP_CACHE", Path.home() / ".cache" / "mpexp"))


_MAGIC = b"MPEXP-REF 1\n"


def _write_cache(path: Path, header: dict, u: np.ndarray):
    data = np.ascontiguousarray(u, dtype="<f8").tobytes()
    header = dict(header, sha256=hashlib.sha256(data).hexdigest(), length=len(u))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(data)
    os.replace(tmp, path)


def _read_cache(path: Path, header: dict):
    """Cached vector, or ``None`` if missing, mismatched or corrupt."""
    try:
        raw = path.read_bytes()
    except OSError:
        return None
    if not raw.startswith(_MAGIC):
        return None
    try:
        line_end = raw.index(b"\n", len(_MAGIC))
        stored = json.loads(raw[len(_MAGIC):line_end])
    except ValueError:
        return None
    data = raw[line_end + 1:]
    if any(stored.get(k) != v for k, v in header.items()):
        return None
    if stored.get("sha256") != hashlib.sha256(data).hexdigest() or len(data) != 8 * stored.get("length", -1):
        return None
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def reference_solution(p: AdrProblem, t_span=(0.0, 0.3), method: str = "dop853", tol: float = 1e-13,
                       steps: int = 100_000, cache_dir=None, use_cache: bool = True) -> np.ndarray:
    """High-accuracy solution at ``t_span[1]``, cached on disk.

    ``method="dop853"`` integrates with an adaptive 8th-order Runge-Kutta
    method at relative and absolute tolerance ``tol``. ``method="ere"``
    takes ``steps`` full-precision exponential Rosenbrock-Euler steps with
    Krylov tolerance ``tol``.
    """
    header = {"problem": p.key(), "t_span": [float(t_span[0]), float(t_span[1])], "method": method, "tol": tol}
    if method == "ere":
        header["steps"] = int(steps)
    elif method != "dop853":
        raise ValueError(f"unknown reference method {method!r}")
    digest = hashlib.sha256(json.dumps(header, sort_keys=True).encode()).hexdigest()[:16]
    header["hash"] = digest
    path = Path(cache_dir or default_cache_dir()) / "reference" / f"adr_{p.nx}x{p.ny}_{digest}.bin"
    if use_cache:
        u = _read_cache(path, header)
        if u is not None:
            return u
        if path.exists():
            log.warning("discarding unusable reference cache %s", path)

    u0 = adr_initial(p)
    if method == "dop853":
        from scipy.integrate import solve_ivp

        sol = solve_ivp(lambda t, u: adr_rhs(p, u), t_span, u0, method="DOP853", rtol=tol, atol=tol)
        if not sol.success:
            raise RuntimeError(f"reference integration failed: {sol.message}")
        u = sol.y[:, -1]
    else:
        from .integrators import IntegratorConfig, integrate, ode_system

        cfg = IntegratorConfig(method="ERE", steps=steps, t0=t_span[0], tf=t_span[1], krylov_tol=tol)
        u, _ = integrate(ode_system(p), u0, cfg)
    if use_cache:
        _write_cache(path, header, u)
    return u

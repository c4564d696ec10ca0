"""CSR matrices, full and reduced-precision products, and test matrix generators."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .precision import FloatFormat, get_format, round_vec

__all__ = [
    "CsrMatrix",
    "MatvecCounters",
    "matvec",
    "matvec_chopped",
    "poisson2d",
    "poisson_rhs",
    "read_matrix_market",
    "write_matrix_market",
    "MatrixMarketError",
    "MalformedHeaderError",
    "UnsupportedFieldError",
    "IndexRangeError",
    "TruncatedStreamError",
    "fetch_suitesparse",
]


class CsrMatrix:
    """Immutable compressed sparse row matrix with float64 values.

    Column indices within each row are strictly increasing and there are no
    duplicate entries; both are checked on construction unless
    ``check=False``.
    """

    def __init__(self, n_rows, n_cols, row_ptr, col_idx, values, check=True):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(col_idx, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        for a in (self.row_ptr, self.col_idx, self.values):
            a.setflags(write=False)
        if check:
            self._validate()
        self._rounded = {}

    def _validate(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr must have length n_rows + 1")
        if rp[0] != 0 or rp[-1] != len(ci) or len(ci) != len(self.values):
            raise ValueError("row_ptr[0] must be 0 and row_ptr[-1] must equal nnz")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        # strictly increasing columns inside each row
        if len(ci) > 1:
            step = np.diff(ci)
            row_start = np.zeros(len(ci), dtype=bool)
            row_start[rp[1:-1][rp[1:-1] < len(ci)]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sp.csr_matrix(m, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return cls.from_scipy(sp.csr_matrix(a))

    @classmethod
    def identity(cls, n) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    @cached_property
    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def to_dense(self) -> np.ndarray:
        return self.scipy.toarray()

    def with_values(self, values) -> "CsrMatrix":
        """Same sparsity pattern, new values."""
        out = CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, values, check=False)
        if "_slots" in self.__dict__:
            out.__dict__["_slots"] = self._slots
        return out

    def scaled(self, s: float) -> "CsrMatrix":
        return self.with_values(self.values * s)

    def rounded_values(self, fmt: FloatFormat) -> np.ndarray:
        vals = self._rounded.get(fmt.name)
        if vals is None:
            vals = round_vec(self.values, fmt)
            self._rounded[fmt.name] = vals
        return vals

    def rounded_scipy(self, fmt: FloatFormat) -> sp.csr_matrix:
        key = ("scipy", fmt.name)
        m = self._rounded.get(key)
        if m is None:
            m = sp.csr_matrix((self.rounded_values(fmt), self.col_idx, self.row_ptr), shape=self.shape)
            self._rounded[key] = m
        return m

    def norm_inf(self) -> float:
        return float(np.max(abs(self.scipy) @ np.ones(self.n_cols), initial=0.0))

    @cached_property
    def _slots(self):
        # For the k-th stored entry of every row that has one: (rows, positions).
        counts = self.row_nnz
        starts = self.row_ptr[:-1]
        slots = []
        for k in range(int(counts.max(initial=0))):
            rows = np.flatnonzero(counts > k)
            slots.append((rows, starts[rows] + k))
        return slots

    def __repr__(self):
        return f"CsrMatrix(shape={self.shape}, nnz={self.nnz})"


@dataclass
class MatvecCounters:
    """Number of full matrix-vector products performed at each precision."""

    counts: dict = field(default_factory=dict)
    overflows: dict = field(default_factory=dict)

    def add(self, fmt, n: int = 1):
        name = get_format(fmt).name
        self.counts[name] = self.counts.get(name, 0) + n

    def flag_overflow(self, fmt):
        name = get_format(fmt).name
        self.overflows[name] = self.overflows.get(name, 0) + 1

    @property
    def overflowed(self) -> bool:
        return bool(self.overflows)

    def __getitem__(self, name) -> int:
        return self.counts.get(get_format(name).name, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def merge(self, other: "MatvecCounters") -> "MatvecCounters":
        for k, v in other.counts.items():
            self.counts[k] = self.counts.get(k, 0) + v
        for k, v in other.overflows.items():
            self.overflows[k] = self.overflows.get(k, 0) + v
        return self

    def copy(self) -> "MatvecCounters":
        return MatvecCounters(dict(self.counts), dict(self.overflows))


MODES = ("op", "io", "out")


def _check_dims(A: CsrMatrix, x: np.ndarray):
    if x.ndim != 1 or x.shape[0] != A.n_cols:
        raise ValueError(f"dimension mismatch: matrix has {A.n_cols} columns, vector has shape {x.shape}")


def matvec(A: CsrMatrix, x) -> np.ndarray:
    """``A @ x`` in binary64, accumulating each row left to right."""
    x = np.asarray(x, dtype=np.float64)
    _check_dims(A, x)
    return A.scipy @ x


def matvec_chopped(A: CsrMatrix, x, fmt, mode: str = "op", counters: MatvecCounters | None = None) -> np.ndarray:
    """``A @ x`` evaluated in the reduced format ``fmt``.

    ``mode="op"`` rounds the entries of ``A`` and ``x``, every product and
    every partial sum of a row. ``mode="io"`` rounds the inputs, accumulates
    in binary64 and rounds each result entry once. ``mode="out"`` only
    rounds the binary64 result, i.e. ``chop(A @ x)``. Non-finite results are
    returned unchanged and recorded in ``counters.overflows``.
    """
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    _check_dims(A, x)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if counters is not None:
        counters.add(fmt)
    if fmt.is_identity:
        return matvec(A, x)

    if mode == "out":
        with np.errstate(over="ignore", invalid="ignore"):
            y = round_vec(A.scipy @ x, fmt)
    elif mode == "io":
        with np.errstate(over="ignore", invalid="ignore"):
            y = round_vec(A.rounded_scipy(fmt) @ round_vec(x, fmt), fmt)
    else:
        vals = A.rounded_values(fmt)
        xr = round_vec(x, fmt)
        with np.errstate(over="ignore", invalid="ignore"):
            prod = round_vec(vals * xr[A.col_idx], fmt)
            y = np.zeros(A.n_rows)
            slots = A._slots
            if slots:
                rows, pos = slots[0]
                y[rows] = prod[pos]
            for rows, pos in slots[1:]:
                y[rows] = round_vec(y[rows] + prod[pos], fmt)
    if counters is not None and not np.all(np.isfinite(y)):
        counters.flag_overflow(fmt)
    return y


def poisson2d(k: int, scale: float = 1.0, sign: int = 1) -> CsrMatrix:
    """``sign * scale`` times the 5-point Laplacian on a k-by-k grid.

    Matches MATLAB ``gallery('poisson', k)``: 4 on the diagonal and -1 for
    each grid neighbour.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    T = sp.diags([-np.ones(k - 1), 2 * np.ones(k), -np.ones(k - 1)], [-1, 0, 1])
    I = sp.identity(k)
    P = sp.kron(I, T) + sp.kron(T, I)
    return CsrMatrix.from_scipy(P * (sign * scale))


def poisson_rhs(k: int) -> np.ndarray:
    """``(1 - r1^2)(1 - r2^2) exp(r1)`` on the interior grid, MATLAB ``(:)`` ordering."""
    g = -1.0 + 2.0 * np.arange(1, k + 1) / (k + 1)
    # meshgrid(g, g)(:) walks down columns: r1 is constant per column.
    r1 = np.repeat(g, k)
    r2 = np.tile(g, k)
    return (1 - r1**2) * (1 - r2**2) * np.exp(r1)


class MatrixMarketError(ValueError):
    pass


class MalformedHeaderError(MatrixMarketError):
    pass


class UnsupportedFieldError(MatrixMarketError):
    pass


class IndexRangeError(MatrixMarketError):
    pass


class TruncatedStreamError(MatrixMarketError):
    pass


def _lines(source):
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for raw in source:
        if isinstance(raw, bytes):
            raw = raw.decode("ascii", errors="replace")
        yield raw


def read_matrix_market(source) -> CsrMatrix:
    """Parse a Matrix Market ``coordinate`` file into CSR.

    Symmetric storage is expanded, pattern entries get value 1.0 and
    duplicate entries are summed.
    """
    lines = _lines(source)
    header = next(lines, "")
    tokens = header.strip().split()
    if len(tokens) != 5 or tokens[0].lower() != "%%matrixmarket" or tokens[1].lower() != "matrix":
        raise MalformedHeaderError(f"not a Matrix Market header: {header.strip()!r}")
    layout, fld, symmetry = (t.lower() for t in tokens[2:])
    if layout != "coordinate":
        raise UnsupportedFieldError(f"only coordinate layout is supported, got {layout!r}")
    if fld not in ("real", "integer", "pattern"):
        raise UnsupportedFieldError(f"unsupported field {fld!r}")
    if symmetry not in ("general", "symmetric"):
        raise UnsupportedFieldError(f"unsupported symmetry {symmetry!r}")

    size_line = None
    for line in lines:
        s = line.strip()
        if s and not s.startswith("%"):
            size_line = s
            break
    if size_line is None:
        raise TruncatedStreamError("missing size line")
    try:
        n_rows, n_cols, nnz = (int(t) for t in size_line.split())
    except ValueError:
        raise MalformedHeaderError(f"bad size line {size_line!r}") from None

    ncol = 2 if fld == "pattern" else 3
    body = []
    for line in lines:
        s = line.strip()
        if s and not s.startswith("%"):
            body.append(s)
            if len(body) == nnz:
                break
    if len(body) < nnz:
        raise TruncatedStreamError(f"expected {nnz} entries, found {len(body)}")
    try:
        data = np.loadtxt(io.StringIO("\n".join(body)), ndmin=2, usecols=range(ncol)) if nnz else np.zeros((0, ncol))
    except ValueError as exc:
        raise MalformedHeaderError(f"bad entry line: {exc}") from None
    i = data[:, 0].astype(np.int64) - 1
    j = data[:, 1].astype(np.int64) - 1
    v = np.ones(nnz) if fld == "pattern" else data[:, 2].astype(np.float64)
    if nnz and (i.min() < 0 or j.min() < 0 or i.max() >= n_rows or j.max() >= n_cols):
        raise IndexRangeError("entry index outside the declared matrix size")
    if symmetry == "symmetric":
        off = i != j
        i, j, v = np.concatenate([i, j[off]]), np.concatenate([j, i[off]]), np.concatenate([v, v[off]])
    m = sp.coo_matrix((v, (i, j)), shape=(n_rows, n_cols)).tocsr()
    return CsrMatrix.from_scipy(m)


def write_matrix_market(A: CsrMatrix, stream, field_kind: str = "real"):
    """Write ``A`` as a general coordinate file (1-based, full storage)."""
    out = [f"%%MatrixMarket matrix coordinate {field_kind} general", f"{A.n_rows} {A.n_cols} {A.nnz}"]
    rows = np.repeat(np.arange(A.n_rows), A.row_nnz)
    for r, c, v in zip(rows, A.col_idx, A.values):
        if field_kind == "pattern":
            out.append(f"{r + 1} {c + 1}")
        else:
            out.append(f"{r + 1} {c + 1} {float(v)!r}")
    text = "\n".join(out) + "\n"
    if isinstance(stream, io.TextIOBase):
        stream.write(text)
    else:
        stream.write(text.encode("ascii"))


def fetch_suitesparse(name: str, cache_dir=None):
    """See :func:`mpexp.suitesparse.fetch_suitesparse`."""
    from .suitesparse import fetch_suitesparse as fetch

    return fetch(name, cache_dir)

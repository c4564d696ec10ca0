"""Emulation of reduced-precision floating point on top of binary64 storage.

Values are always held as float64; :func:`round_to` maps them onto the
grid of a narrower binary format with round-to-nearest, ties-to-even.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FloatFormat",
    "DOUBLE",
    "SINGLE",
    "TF32",
    "HALF",
    "BFLOAT16",
    "PRESETS",
    "get_format",
    "round_to",
    "round_vec",
    "chopped_add",
    "chopped_mul",
]

_MANTISSA_BITS = 52


@dataclass(frozen=True)
class FloatFormat:
    """A binary floating point format.

    ``significand_bits`` counts the implicit leading bit, so IEEE single
    is ``(24, 8)``.
    """

    name: str
    significand_bits: int
    exponent_bits: int
    supports_subnormals: bool = True
    rounding: str = "nearest-even"

    def __post_init__(self):
        if self.significand_bits < 2 or self.exponent_bits < 2:
            raise ValueError("significand_bits and exponent_bits must be >= 2")
        if self.significand_bits > 53 or self.exponent_bits > 11:
            raise ValueError("formats wider than binary64 cannot be emulated")
        if self.rounding != "nearest-even":
            raise ValueError(f"unsupported rounding mode {self.rounding!r}")

    @property
    def emax(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def emin(self) -> int:
        return 1 - self.emax

    @property
    def eps(self) -> float:
        """Spacing of the grid at 1.0, ``2**(1 - significand_bits)``."""
        return 2.0 ** (1 - self.significand_bits)

    @property
    def unit_roundoff(self) -> float:
        return 2.0 ** (-self.significand_bits)

    @property
    def xmax(self) -> float:
        return float(np.ldexp(2.0 - self.eps, self.emax))

    @property
    def xmin(self) -> float:
        """Smallest positive normal number."""
        return float(np.ldexp(1.0, self.emin))

    @property
    def is_identity(self) -> bool:
        return self.significand_bits == 53 and self.exponent_bits == 11 and self.supports_subnormals

    def __str__(self):
        return self.name


DOUBLE = FloatFormat("double", 53, 11)
SINGLE = FloatFormat("single", 24, 8)
# TF32 as exposed by tensor cores: fp32 range, 10 explicit mantissa bits,
# subnormals flushed.
TF32 = FloatFormat("tf32", 11, 8, supports_subnormals=False)
HALF = FloatFormat("half", 11, 5)
BFLOAT16 = FloatFormat("bfloat16", 8, 8)

PRESETS = {f.name: f for f in (DOUBLE, SINGLE, TF32, HALF, BFLOAT16)}

_ALIASES = {
    "fp64": "double",
    "float64": "double",
    "fp32": "single",
    "float32": "single",
    "fp16": "half",
    "float16": "half",
    "bf16": "bfloat16",
}


def get_format(fmt) -> FloatFormat:
    """Resolve a preset name (``"double"``, ``"single"``, ``"tf32"``, ...)."""
    if isinstance(fmt, FloatFormat):
        return fmt
    key = str(fmt).lower()
    key = _ALIASES.get(key, key)
    try:
        return PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown float format {fmt!r}; expected one of {sorted(PRESETS)}") from None


def _round_array(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    t = fmt.significand_bits
    drop = _MANTISSA_BITS - (t - 1)

    # Normal range: round the binary64 bit pattern directly. Adding
    # half-ulp-minus-one plus the kept lsb gives ties-to-even, and a carry
    # out of the mantissa bumps the exponent as it should.
    bits = x.view(np.uint64)
    lsb = (bits >> np.uint64(drop)) & np.uint64(1)
    bits = bits + (np.uint64((1 << (drop - 1)) - 1) + lsb)
    bits &= ~np.uint64((1 << drop) - 1)
    y = bits.view(np.float64)

    ax = np.abs(x)
    small = ax < fmt.xmin
    if np.any(small):
        xs = x[small]
        if fmt.supports_subnormals:
            # Fixed quantum below the normal range; scaling by a power of
            # two is exact, so rint decides the tie.
            q = fmt.emin - (t - 1)
            ys = np.ldexp(np.rint(np.ldexp(xs, -q)), q)
        else:
            ys = y[small]
            ys = np.where(np.abs(ys) < fmt.xmin, np.copysign(0.0, xs), ys)
        y[small] = ys

    big = np.abs(y) > fmt.xmax
    if np.any(big):
        y[big] = np.copysign(np.inf, x[big])
    nonfinite = ~np.isfinite(x)
    if np.any(nonfinite):
        y[nonfinite] = x[nonfinite]
    return y


def round_vec(v, fmt) -> np.ndarray:
    """Elementwise :func:`round_to`; always returns a new float64 array."""
    fmt = get_format(fmt)
    x = np.array(v, dtype=np.float64, copy=True)
    if fmt.is_identity or x.size == 0:
        return x
    shape = x.shape
    return _round_array(np.ascontiguousarray(x).reshape(-1), fmt).reshape(shape)


def round_to(x: float, fmt) -> float:
    """Nearest value of ``fmt`` to ``x`` (ties to even), as a Python float.

    Magnitudes past the largest finite value become ``±inf``; NaN stays NaN.
    """
    return float(round_vec(np.array([x], dtype=np.float64), fmt)[0])


def chopped_add(a, b, fmt):
    """``round_to(a + b)``.

    The binary64 sum of two operands of at most 26 significant bits is
    rounded once more into ``fmt``; 53 >= 2t + 2 makes that double rounding
    harmless, so the result is the correctly rounded sum.
    """
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return round_to(float(a) + float(b), fmt)
    return round_vec(np.add(a, b, dtype=np.float64), fmt)


def chopped_mul(a, b, fmt):
    """``round_to(a * b)``; see :func:`chopped_add` for exactness."""
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return round_to(float(a) * float(b), fmt)
    return round_vec(np.multiply(a, b, dtype=np.float64), fmt)

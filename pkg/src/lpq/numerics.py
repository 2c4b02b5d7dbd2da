"""Software emulation of IEEE binary16 with configurable down-conversion policies.

Half values are carried around as ``uint16`` bit patterns. Conversions are
vectorized over numpy arrays and exact: every step is a power-of-two scaling
or a single round-half-even, so results do not depend on the platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_MAX = 65504.0
HALF_MIN_NORMAL = 2.0**-14
HALF_MIN_SUBNORMAL = 2.0**-24
CANONICAL_NAN = 0x7E00

_OVERFLOW = ("saturate", "inf")
_SUBNORMAL = ("flush", "keep", "min_normal")
_NAN = ("propagate", "fail")


class HalfConversionError(ValueError):
    pass


@dataclass(frozen=True)
class HalfPolicy:
    """How to treat overflow, results in the subnormal range, and NaN."""

    overflow: str = "saturate"
    subnormal: str = "min_normal"
    nan: str = "propagate"

    def __post_init__(self):
        if self.overflow not in _OVERFLOW:
            raise ValueError(f"overflow must be one of {_OVERFLOW}, got {self.overflow!r}")
        if self.subnormal not in _SUBNORMAL:
            raise ValueError(f"subnormal must be one of {_SUBNORMAL}, got {self.subnormal!r}")
        if self.nan not in _NAN:
            raise ValueError(f"nan must be one of {_NAN}, got {self.nan!r}")


DEFAULT_POLICY = HalfPolicy()
IEEE_POLICY = HalfPolicy(overflow="inf", subnormal="keep", nan="propagate")
# fp16 arithmetic inside kernels: saturating like storage, but gradual underflow
KERNEL_POLICY = HalfPolicy(overflow="saturate", subnormal="keep", nan="propagate")


def round_half_even(x: float) -> int:
    """Nearest integer to ``x``; exact ties go to the even neighbour."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot round non-finite value {x}")
    # Python's round() on floats is round-half-even and exact
    return int(round(x))


def _rne_magnitude(a: np.ndarray) -> np.ndarray:
    """Round non-negative finite float64 magnitudes to the binary16 grid (unbounded exponent above)."""
    _, e = np.frexp(a)
    # a in [2^(e-1), 2^e): quantum is 2^(e-11), floored at the subnormal quantum
    exp = np.maximum(e.astype(np.int64) - 1, -14)
    return np.ldexp(np.rint(np.ldexp(a, 10 - exp)), exp - 10)


def round_to_half(x, policy: HalfPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Round values to the nearest binary16 value, returned as float64.

    This is ``from_half(to_half(x))`` without the bit packing, which is what
    the kernels need for per-step fp16 rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    nan = np.isnan(x)
    if nan.any() and policy.nan == "fail":
        raise HalfConversionError("NaN input with nan='fail' policy")
    a = np.abs(np.where(nan, 0.0, x))
    inf = np.isinf(a)
    q = _rne_magnitude(np.where(inf, 0.0, a))

    over = inf | (q > HALF_MAX)
    if policy.overflow == "saturate":
        q = np.where(over, HALF_MAX, q)
    else:
        q = np.where(over, np.inf, q)

    if policy.subnormal != "keep":
        # nonzero inputs whose rounded result is not a normal number
        under = (a != 0) & (q < HALF_MIN_NORMAL)
        fill = 0.0 if policy.subnormal == "flush" else HALF_MIN_NORMAL
        q = np.where(under, fill, q)

    out = np.copysign(q, x)
    return np.where(nan, np.nan, out)


def to_half(x, policy: HalfPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Convert fp32/fp64 values to binary16 bit patterns (``uint16``).

    Rounds to nearest even, then applies the overflow / subnormal / NaN policy.
    NaN is always emitted as the single canonical quiet NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    q = round_to_half(x, policy)
    nan = np.isnan(q)
    sign = np.signbit(x).astype(np.uint16) << 15

    a = np.abs(np.where(nan, 0.0, q))
    inf = np.isinf(a)
    a = np.where(inf, 0.0, a)
    _, e = np.frexp(a)
    exp = e.astype(np.int64) - 1
    normal = a >= HALF_MIN_NORMAL
    # normal: (exp+15) << 10 | mantissa ; subnormal: a / 2^-24
    mant_normal = np.ldexp(a, 10 - exp) - 1024.0
    field_normal = ((exp + 15) << 10) + mant_normal.astype(np.int64)
    field_sub = np.ldexp(a, 24).astype(np.int64)
    bits = np.where(normal, field_normal, field_sub)
    bits = np.where(inf, 0x7C00, bits)
    bits = bits.astype(np.uint16) | sign
    bits = np.where(nan, np.uint16(CANONICAL_NAN), bits)
    return bits.astype(np.uint16)


def from_half(bits) -> np.ndarray:
    """Exact widening of binary16 bit patterns to float32."""
    b = np.asarray(bits).astype(np.uint16).astype(np.int64)
    sign = np.where(b & 0x8000, -1.0, 1.0)
    exp = (b >> 10) & 0x1F
    mant = b & 0x3FF
    val = np.where(
        exp == 0,
        np.ldexp(mant.astype(np.float64), -24),
        np.ldexp((mant + 1024).astype(np.float64), exp - 25),
    )
    val = np.where(exp == 0x1F, np.where(mant == 0, np.inf, np.nan), val)
    return (sign * val).astype(np.float32)


def half_bits(value: float) -> int:
    """Scalar convenience: bit pattern of ``value`` under the default policy."""
    return int(to_half(value))

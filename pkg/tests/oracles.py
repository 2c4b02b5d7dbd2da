"""Independent reference implementations used only by the tests."""

from fractions import Fraction

import numpy as np


def half_value(bits: int) -> Fraction:
    """Exact value of a finite binary16 pattern, from the format definition."""
    sign = -1 if bits & 0x8000 else 1
    e = (bits >> 10) & 0x1F
    m = bits & 0x3FF
    if e == 0x1F:
        raise ValueError("not finite")
    if e == 0:
        return sign * Fraction(m, 2**24)
    return sign * Fraction(1024 + m, 1024) * Fraction(2) ** (e - 15)


_POS = None


def positive_halves() -> np.ndarray:
    """All finite non-negative binary16 values, ascending (index == bit pattern)."""
    global _POS
    if _POS is None:
        _POS = np.array([float(half_value(b)) for b in range(0x7C00)])
    return _POS


def to_half_ieee(x) -> np.ndarray:
    """IEEE round-to-nearest-even by nearest-neighbour search over the value table."""
    x = np.asarray(x, dtype=np.float64)
    vals = positive_halves()
    a = np.abs(x)
    hi = np.clip(np.searchsorted(vals, a, side="left"), 1, len(vals) - 1)
    lo = hi - 1
    d_lo = a - vals[lo]
    d_hi = vals[hi] - a
    pick = np.where(d_lo < d_hi, lo, np.where(d_hi < d_lo, hi, np.where(lo % 2 == 0, lo, hi)))
    pick = np.where(a <= vals[0], 0, pick)
    bits = pick.astype(np.int64)
    # beyond 65504 the next (virtual) grid point is 65536; ties at 65520 go to it
    bits = np.where(a >= 65520.0, 0x7C00, np.where(a > 65504.0, 0x7BFF, bits))
    bits = np.where(np.isinf(a), 0x7C00, bits)
    bits = bits | (np.signbit(x).astype(np.int64) << 15)
    return np.where(np.isnan(x), 0x7E00, bits).astype(np.uint16)


def int8_gemm_exact(a_q, a_zp, w_q, w_zp):
    """sum_t (a - za)(w - zw) with Python integers."""
    a = np.asarray(a_q, dtype=object) - int(a_zp)
    w = np.asarray(w_q, dtype=object) - np.asarray(w_zp, dtype=object)[None, :]
    return np.array(a.dot(w), dtype=np.int64)


def fc64(x, w, b=None):
    y = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    return y if b is None else y + np.asarray(b, dtype=np.float64)


def sigmoid64(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))

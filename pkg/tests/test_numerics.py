import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpq.numerics import (
    DEFAULT_POLICY,
    HALF_MAX,
    HALF_MIN_NORMAL,
    IEEE_POLICY,
    HalfConversionError,
    HalfPolicy,
    from_half,
    round_half_even,
    round_to_half,
    to_half,
)
from oracles import half_value, to_half_ieee

ALL_BITS = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)


def test_round_half_even_ties():
    assert round_half_even(127.5) == 128
    assert round_half_even(2.5) == 2
    assert round_half_even(-127.5) == -128
    assert round_half_even(-0.5) == 0
    assert round_half_even(3.4999) == 3


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_round_half_even_rejects_nonfinite(bad):
    with pytest.raises(ValueError):
        round_half_even(bad)


def test_to_half_examples():
    assert int(to_half(65520.0, HalfPolicy(overflow="saturate"))) == 0x7BFF
    assert float(from_half(to_half(65520.0, DEFAULT_POLICY))) == 65504.0
    assert float(from_half(to_half(1.0))) == 1.0
    assert float(from_half(to_half(0.1))) == 0.0999755859375
    assert int(to_half(65520.0, IEEE_POLICY)) == 0x7C00


def test_from_half_examples():
    assert float(from_half(0x3C00)) == 1.0
    assert float(from_half(0x7BFF)) == 65504.0 == (2 - 2**-10) * 2**15
    neg0 = from_half(0x8000)
    assert float(neg0) == 0.0 and np.signbit(neg0)


def test_exhaustive_roundtrip():
    vals = from_half(ALL_BITS)
    back = to_half(vals, IEEE_POLICY)
    nan = np.isnan(vals)
    assert nan.sum() == 2 * 1023  # every nonzero mantissa, both signs
    assert np.array_equal(back[~nan], ALL_BITS[~nan])
    assert (back[nan] == 0x7E00).all()


def test_exhaustive_values_match_definition():
    vals = from_half(ALL_BITS)
    for b in range(0, 1 << 16, 97):
        e = (b >> 10) & 0x1F
        if e == 0x1F:
            continue
        assert float(vals[b]) == float(half_value(b))


def test_extremes():
    assert float(from_half(0x0400)) == HALF_MIN_NORMAL == 2.0**-14
    assert float(from_half(0x7BFF)) == HALF_MAX


def test_ieee_mode_matches_oracle_random():
    rng = np.random.default_rng(0)
    x = np.concatenate(
        [
            rng.standard_normal(300_000).astype(np.float32) * np.float32(100),
            (rng.random(300_000) * 2 - 1).astype(np.float32) * np.float32(1e-5),
            rng.uniform(-70000, 70000, 300_000).astype(np.float32),
            rng.integers(0, 2**31, 100_000, dtype=np.uint32).view(np.float32),
        ]
    )
    with np.errstate(invalid="ignore"):  # signalling NaN patterns quieten on widening
        assert np.array_equal(to_half(x, IEEE_POLICY), to_half_ieee(x))


def test_saturate_never_inf():
    x = np.array([1e6, -1e6, np.inf, -np.inf, 65519.99, 70000.0], dtype=np.float64)
    out = from_half(to_half(x, DEFAULT_POLICY))
    assert np.isfinite(out).all()
    assert np.array_equal(np.abs(out), np.full(6, HALF_MAX, dtype=np.float32))


def test_subnormal_policies():
    x = np.array([1e-6, -1e-6, 3e-5, 2.0**-24], dtype=np.float64)
    flush = from_half(to_half(x, HalfPolicy(subnormal="flush")))
    assert (flush == 0).all() and np.array_equal(np.signbit(flush), np.signbit(x))
    sat = from_half(to_half(x, HalfPolicy(subnormal="min_normal")))
    assert np.array_equal(np.abs(sat), np.full(4, HALF_MIN_NORMAL, dtype=np.float32))
    keep = from_half(to_half(x, HalfPolicy(subnormal="keep")))
    assert float(keep[3]) == 2.0**-24


def test_zero_is_not_subnormal():
    for pol in (HalfPolicy(subnormal="flush"), HalfPolicy(subnormal="min_normal")):
        assert int(to_half(0.0, pol)) == 0
        assert int(to_half(-0.0, pol)) == 0x8000


def test_nan_policies():
    assert int(to_half(np.nan)) == 0x7E00
    with pytest.raises(HalfConversionError):
        to_half(np.array([1.0, np.nan]), HalfPolicy(nan="fail"))


def test_policy_validation():
    with pytest.raises(ValueError):
        HalfPolicy(overflow="wrap")


@given(st.floats(min_value=HALF_MIN_NORMAL, max_value=HALF_MAX, width=32), st.booleans())
def test_half_ulp_bound_normals(x, neg):
    x = -x if neg else x
    r = float(from_half(to_half(x, IEEE_POLICY)))
    assert abs(x - r) <= 2.0**-11 * abs(x)


@given(st.floats(allow_nan=False, width=32))
def test_round_to_half_agrees_with_bits(x):
    for pol in (DEFAULT_POLICY, IEEE_POLICY):
        assert np.float32(round_to_half(x, pol)).tobytes() == from_half(to_half(x, pol)).tobytes()


@given(st.floats(allow_nan=False, allow_infinity=False, width=32), st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_conversion_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert from_half(to_half(lo, IEEE_POLICY)) <= from_half(to_half(hi, IEEE_POLICY))

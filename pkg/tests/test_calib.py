import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lpq.calib import Histogram, collect, derive_range, load_calibration, modeled_l2_error, save_calibration
from lpq.quant import UINT8, RangeMethod

METHODS = [RangeMethod.minmax(), RangeMethod.percentile(0.99), RangeMethod.l2min()]
samples = hnp.arrays(np.float64, st.integers(1, 300), elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_observe_basic():
    h = Histogram().observe([1.0, 2.0, 3.0])
    assert h.total == 3 and (h.running_min, h.running_max) == (1.0, 3.0)
    assert h.counts.sum() == 3


def test_disjoint_observes_match_single():
    a = Histogram().observe([1.0, 2.0]).observe([10.0, -4.0])
    b = Histogram().observe([1.0, 2.0, 10.0, -4.0])
    assert a.total == b.total == 4
    assert (a.running_min, a.running_max) == (b.running_min, b.running_max)


def test_minmax_equals_running_extrema():
    x = np.random.default_rng(0).standard_normal(100_000)
    h = Histogram()
    for chunk in np.array_split(x, 7):
        h.observe(chunk)
    assert derive_range(h, RangeMethod.minmax()) == (x.min(), x.max())


def test_growth_by_doubling_keeps_counts():
    h = Histogram(bins=8).observe(np.linspace(0, 1, 100))
    width = h.hi - h.lo
    h.observe([3.5])
    assert h.hi - h.lo == pytest.approx(4 * width)
    assert h.counts.sum() == 101


@pytest.mark.parametrize("method", METHODS)
def test_constant_mass(method):
    h = Histogram().observe(np.full(50, 2.5))
    assert derive_range(h, method) == (2.5, 2.5)


def test_percentile_uniform():
    x = np.random.default_rng(1).random(200_000)
    h = Histogram().observe(x)
    lo, hi = derive_range(h, RangeMethod.percentile(0.99))
    assert abs(lo - 0.005) <= h.width + 1e-3 and abs(hi - 0.995) <= h.width + 1e-3


def test_l2min_prefers_clipping_heavy_tail():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.standard_normal(10**6), [100.0]])
    h = Histogram().observe(x)
    lo, hi = derive_range(h, RangeMethod.l2min())
    assert hi < 50
    assert modeled_l2_error(h, lo, hi)[0] <= modeled_l2_error(h, h.running_min, h.running_max)[0]


def test_empty_and_nan():
    with pytest.raises(ValueError):
        derive_range(Histogram(), RangeMethod.minmax())
    with pytest.raises(ValueError):
        Histogram().observe([1.0, np.nan])


def test_serialization_roundtrip(tmp_path):
    x = np.random.default_rng(3).standard_normal(1000)
    hists = collect({"a": x, "b": x * 3})
    save_calibration(hists, tmp_path / "c.json")
    back = load_calibration(tmp_path / "c.json")
    for k in hists:
        assert back[k].to_dict() == hists[k].to_dict()
        for m in METHODS:
            assert derive_range(back[k], m) == derive_range(hists[k], m)


def test_corrupt_counts_rejected():
    d = Histogram().observe([1.0, 2.0]).to_dict()
    d["total"] = 5
    with pytest.raises(ValueError):
        Histogram.from_dict(d)


@given(samples)
def test_counts_sum_to_total(x):
    h = Histogram(bins=64)
    for chunk in np.array_split(x, 3):
        h.observe(chunk)
    assert h.counts.sum() == h.total == x.size
    assert h.running_min <= h.running_max


@given(samples, st.sampled_from(METHODS))
def test_range_within_running_extrema(x, method):
    h = Histogram(bins=256).observe(x)
    lo, hi = derive_range(h, method)
    assert h.running_min <= lo <= hi <= h.running_max


@given(samples)
def test_l2min_no_worse_than_minmax(x):
    h = Histogram(bins=256).observe(x)
    lo, hi = derive_range(h, RangeMethod.l2min(), UINT8)
    assert modeled_l2_error(h, lo, hi)[0] <= modeled_l2_error(h, h.running_min, h.running_max)[0] * (1 + 1e-12)


@given(samples, samples)
def test_merge_matches_concatenated_stream(a, b):
    ha = Histogram(bins=256).observe(a)
    hb = Histogram(bins=256).observe(b)
    m = ha.merge(hb)
    c = Histogram(bins=256).observe(np.concatenate([a, b]))
    assert m.total == a.size + b.size
    assert (m.running_min, m.running_max) == (c.running_min, c.running_max)
    assert m.counts.sum() == m.total
    pm = derive_range(m, RangeMethod.percentile(0.9))
    pc = derive_range(c, RangeMethod.percentile(0.9))
    tol = max(m.width, c.width) + max(ha.width, hb.width)
    assert abs(pm[0] - pc[0]) <= tol and abs(pm[1] - pc[1]) <= tol


@given(samples, samples)
def test_merge_commutative_totals(a, b):
    ha, hb = Histogram(bins=64).observe(a), Histogram(bins=64).observe(b)
    ab, ba = ha.merge(hb), hb.merge(ha)
    assert ab.total == ba.total
    assert (ab.running_min, ab.running_max) == (ba.running_min, ba.running_max)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fermatmon.fsd import (
    _partitions,
    ccdf,
    choose_threshold,
    entropy,
    estimate_fsd,
    exact_fsd,
    mrac,
    retarget_threshold,
)
from fermatmon.tower import TowerConfig, TowerSketch

FSD = {1: 100.0, 10: 50.0, 100: 10.0}


def test_choose_threshold_examples():
    assert choose_threshold(FSD, 12) == 11
    assert choose_threshold(FSD, 5) == 101
    assert choose_threshold(FSD, 160) == 1
    assert choose_threshold(FSD, 1000) == 1
    assert choose_threshold(FSD, 60) == 2
    assert choose_threshold(FSD, 0) == 101
    with pytest.raises(ValueError):
        choose_threshold({}, 10)


@given(st.dictionaries(st.integers(1, 500), st.integers(1, 50), min_size=1, max_size=30),
       st.integers(0, 2000))
def test_choose_threshold_is_minimal(fsd, cap):
    T = choose_threshold(fsd, cap)
    assert ccdf(fsd, T) <= cap
    if T > 1:
        assert ccdf(fsd, T - 1) > cap


def test_entropy():
    assert entropy({1: 2000}) == pytest.approx(math.log(2000))
    assert entropy({5: 1}) == 0.0
    assert entropy({}) == 0.0
    sizes = [1, 1, 2, 4]
    p = np.array(sizes) / 8
    assert entropy(exact_fsd(sizes)) == pytest.approx(-(p * np.log(p)).sum())


def test_exact_fsd_drops_zero():
    assert exact_fsd([0, 3, 3, 1]) == {1: 1.0, 3: 2.0}


def test_partitions_enumerate_correctly():
    vals, a, b, c, sym = _partitions(6)
    assert np.all(a + b + c == vals)
    assert np.all((a >= b) & (b >= c))
    # partitions of 6 into at most 3 parts: 6, 51, 42, 33, 411, 321, 222
    assert np.count_nonzero(vals == 6) == 7
    assert sym[(vals == 6) & (a == 2) & (b == 2)][0] == 6.0


def test_mrac_recovers_sparse_counters():
    rng = np.random.default_rng(1)
    w = 8192
    sizes = rng.integers(1, 8, 800)
    idx = rng.integers(0, w, sizes.size)
    counters = np.bincount(idx, weights=sizes, minlength=w).astype(np.int64)
    n = mrac(counters, vmax=20)
    assert n.sum() == pytest.approx(800, rel=0.05)
    truth = np.bincount(sizes, minlength=8)
    for s in range(1, 8):
        assert n[s] == pytest.approx(truth[s], abs=0.25 * truth[s] + 5)


def test_mrac_empty():
    assert mrac(np.zeros(16, dtype=np.int64)).sum() == 0


def test_estimate_fsd_small_flows():
    rng = np.random.default_rng(2)
    tw = TowerSketch(TowerConfig.from_seed(5))
    sizes = rng.integers(1, 5, 3000)
    flows = np.repeat(np.arange(1, sizes.size + 1, dtype=np.uint64), sizes)
    tw.insert_many(flows)
    est = estimate_fsd(tw)
    assert sum(est.values()) == pytest.approx(3000, rel=0.05)
    assert entropy(est) == pytest.approx(entropy(exact_fsd(sizes)), rel=0.05)


def test_estimate_fsd_uses_hh_sizes():
    tw = TowerSketch(TowerConfig.from_seed(5))
    est = estimate_fsd(tw, hh_sizes=[100000, 3])
    cap = tw.config.caps[-1]
    assert est == ({100000: 1.0} if 100000 >= cap else {})


def test_retarget_calibrates_to_observation():
    # the FSD thinks 60 flows are >= 10, but the part actually held 120
    T = retarget_threshold(FSD, 10, 120, 20)
    scaled = {s: c * 2 for s, c in FSD.items()}
    assert T == choose_threshold(scaled, 20)
    assert retarget_threshold({}, 7, 5, 5) == 7


def test_retarget_ceiling_picks_closer_lower():
    fsd = {1: 100.0, 2: 30.0}
    assert retarget_threshold(fsd, 1, 130, 100) == 2
    assert retarget_threshold(fsd, 1, 130, 100, ceiling=140) == 1
    assert retarget_threshold(fsd, 1, 130, 100, ceiling=120) == 2

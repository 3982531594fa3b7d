import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntscc.rate import (FramingError, RateAllocation, RateConfig, RateConfigError, allocate, pack_rate_map,
                        patch_count, quantize_bandwidth, unpack_rate_map)

CFG = RateConfig.evenly_spaced(16, 256, kq=4, eta=0.2)


def test_default_value_set():
    assert CFG.values == tuple(range(16, 257, 16))


def test_value_set_must_match_kq():
    with pytest.raises(RateConfigError):
        RateConfig(0.2, (4, 8, 12), 4)
    with pytest.raises(RateConfigError):
        RateConfig(0.2, tuple(range(16, 0, -1)), 4)


def test_quantize_nearest_ties_up_and_clamps():
    vals = CFG.values
    got = [vals[i] for i in quantize_bandwidth([0, 24, 23.9, 40, 1000, 255], vals)]
    assert got == [16, 32, 16, 48, 256, 256]


def test_allocate_scales_by_eta():
    alloc = allocate(np.array([100.0, 400.0, 1e6]), CFG)
    # 0.2 * 100 = 20 -> 16, 0.2 * 400 = 80 -> 80
    assert list(alloc.costs) == [16, 80, 256]
    assert alloc.k_y == 352


@settings(max_examples=100, deadline=None)
@given(k=st.floats(-100, 1000))
def test_quantized_value_is_nearest(k):
    v = CFG.values[int(quantize_bandwidth(k, CFG.values))]
    best = min(abs(u - k) for u in CFG.values)
    assert abs(v - k) == pytest.approx(best)


@settings(max_examples=50, deadline=None)
@given(idx=st.lists(st.integers(0, 15), min_size=1, max_size=200))
def test_rate_map_round_trip(idx):
    alloc = RateAllocation(np.array(idx), CFG.values)
    bits = pack_rate_map(alloc, CFG)
    assert bits.size == len(idx) * CFG.kq
    back = unpack_rate_map(bits, CFG, len(idx))
    np.testing.assert_array_equal(back.index, alloc.index)


def test_rate_map_msb_first():
    bits = pack_rate_map(RateAllocation(np.array([1, 8]), CFG.values), CFG)
    assert bits.tolist() == [0, 0, 0, 1, 1, 0, 0, 0]


def test_rate_map_wrong_length():
    with pytest.raises(FramingError):
        unpack_rate_map(np.zeros(7, dtype=np.uint8), CFG, 2)


def test_patch_count():
    assert patch_count(768, 512, 4) == 1536
    assert patch_count(32, 32, 2) == 64
    with pytest.raises(ValueError):
        patch_count(30, 32, 2)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 5000), b=st.floats(0, 5000))
def test_allocation_monotone_in_bits(a, b):
    alloc = allocate(np.array([a, b]), CFG)
    if a >= b:
        assert alloc.costs[0] >= alloc.costs[1]


def test_rate_map_length():
    alloc = RateAllocation(np.zeros(64, dtype=np.int64), CFG.values)
    assert pack_rate_map(alloc, CFG).size == 256 == alloc.rate_map_bits(4)
    assert RateAllocation(np.zeros(patch_count(768, 512, 4), dtype=np.int64), CFG.values).rate_map_bits(4) == 6144

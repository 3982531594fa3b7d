import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntscc.rangecoder import (FreqTable, RangeCoderError, quantize_pmf, range_decode, range_encode,
                              tables_digest)


def _tables(rng, n, size=33):
    return [quantize_pmf(rng.dirichlet(np.full(size, 0.3)), -(size // 2)) for _ in range(n)]


def test_quantized_table_sums_to_total_with_min_one():
    t = quantize_pmf(np.array([1.0, 0.0, 1e-9]), 0)
    assert t.freqs.sum() == 1 << 16
    assert t.freqs.min() >= 1


def test_invalid_table_rejected():
    with pytest.raises(RangeCoderError):
        FreqTable(np.array([1, 2, 3]), 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(0, 300))
def test_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    tables = _tables(rng, 3, 9)
    idx = rng.integers(0, 3, n)
    sym = np.array([rng.choice(np.arange(-4, 5), p=tables[i].freqs / tables[i].freqs.sum()) for i in idx],
                   dtype=np.int64)
    stream = range_encode(sym, tables, idx)
    np.testing.assert_array_equal(range_decode(stream, tables, n, idx), sym)


def test_out_of_support_symbol_rejected():
    tables = _tables(np.random.default_rng(0), 1, 5)
    with pytest.raises(RangeCoderError):
        range_encode(np.array([7]), tables)


def test_truncated_stream_rejected():
    rng = np.random.default_rng(2)
    tables = _tables(rng, 1)
    sym = rng.integers(-16, 17, 2000)
    stream = range_encode(sym, tables)
    with pytest.raises(RangeCoderError):
        range_decode(stream.data[: len(stream.data) // 2], tables, len(sym))


def test_table_digest_mismatch_rejected():
    rng = np.random.default_rng(3)
    tables = _tables(rng, 2)
    stream = range_encode(np.zeros(10, dtype=np.int64), tables, np.zeros(10, dtype=np.int64))
    other = _tables(rng, 2)
    assert tables_digest(other) != tables_digest(tables)
    with pytest.raises(RangeCoderError):
        range_decode(stream, other, 10, np.zeros(10, dtype=np.int64))


def test_length_near_cross_entropy():
    rng = np.random.default_rng(4)
    pmf = np.array([0.7, 0.2, 0.1])
    sym = rng.choice(3, 20000, p=pmf)
    t = quantize_pmf(pmf, 0)
    stream = range_encode(sym, [t])
    p = t.freqs / t.freqs.sum()
    ce = -np.log2(p[sym]).sum()
    assert stream.bit_length <= ce * 1.01 + 64

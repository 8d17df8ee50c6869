import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentzip.entropy import PRECISION, DiscretePMFTable, TableSet
from latentzip.errors import CodingError


def _random_table(rng, width=None, sym_min=None) -> DiscretePMFTable:
    width = width or int(rng.integers(2, 120))
    p = rng.random(width) ** 3 + 1e-12
    p /= p.sum()
    sym_min = int(rng.integers(-300, 300)) if sym_min is None else sym_min
    return DiscretePMFTable.from_probabilities(p, sym_min)


def _draw(rng, table: DiscretePMFTable, n: int) -> np.ndarray:
    return rng.choice(table.width, size=n, p=table.pmf()) + table.sym_min


class TestRoundTrip:
    def test_empty_sequence(self):
        ts = TableSet([_random_table(np.random.default_rng(0))])
        code = ts.encode(np.empty(0, np.int64))
        assert len(code) <= 16  # flush only
        out = ts.decode(code, 0)
        assert out.size == 0

    def test_single_symbol(self):
        rng = np.random.default_rng(1)
        t = _random_table(rng)
        ts = TableSet([t])
        sym = np.array([t.sym_min + t.width // 2])
        assert np.array_equal(ts.decode(ts.encode(sym), 1), sym)

    def test_multi_table_round_trip(self):
        rng = np.random.default_rng(2)
        tables = [_random_table(rng) for _ in range(5)]
        ts = TableSet(tables)
        n = 5000
        ids = rng.integers(0, 5, n)
        syms = np.empty(n, np.int64)
        for i, t in enumerate(tables):
            mask = ids == i
            syms[mask] = _draw(rng, t, int(mask.sum()))
        code = ts.encode(syms, ids)
        np.testing.assert_array_equal(ts.decode(code, n, ids), syms)

    def test_degenerate_skewed_pmf(self):
        # most mass on one symbol, floor keeps the others codable
        p = np.array([1e-12, 1.0, 1e-12])
        t = DiscretePMFTable.from_probabilities(p / p.sum(), -1)
        ts = TableSet([t])
        syms = np.array([-1, 0, 1] * 2000)
        np.testing.assert_array_equal(ts.decode(ts.encode(syms), syms.size), syms)

    def test_constant_symbol_stream(self):
        rng = np.random.default_rng(3)
        t = _random_table(rng, width=64)
        ts = TableSet([t])
        syms = np.full(3000, t.sym_min, dtype=np.int64)
        np.testing.assert_array_equal(ts.decode(ts.encode(syms), syms.size), syms)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 400))
    @settings(max_examples=40, deadline=None)
    def test_randomized_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        t = _random_table(rng)
        ts = TableSet([t])
        syms = _draw(rng, t, n).astype(np.int64)
        np.testing.assert_array_equal(ts.decode(ts.encode(syms), n), syms)


class TestErrors:
    def test_symbol_outside_support(self):
        rng = np.random.default_rng(4)
        t = _random_table(rng, width=8, sym_min=0)
        ts = TableSet([t])
        with pytest.raises(CodingError):
            ts.encode(np.array([9]))
        with pytest.raises(CodingError):
            ts.encode(np.array([-1]))

    def test_truncated_stream(self):
        rng = np.random.default_rng(5)
        t = _random_table(rng)
        ts = TableSet([t])
        syms = _draw(rng, t, 500)
        code = ts.encode(syms)
        with pytest.raises(CodingError):
            ts.decode(code[: len(code) // 2], 500)
        with pytest.raises(CodingError):
            ts.decode(b"", 1)


class TestCodeLength:
    def test_uniform_pmf_costs_k_bits(self):
        # uniform over 2^k symbols has an exact fixed-point representation
        k = 6
        width = 1 << k
        freq = np.full(width, (1 << PRECISION) // width, dtype=np.uint32)
        t = DiscretePMFTable(sym_min=0, freq=freq)
        ts = TableSet([t])
        rng = np.random.default_rng(6)
        syms = rng.integers(0, width, 20000)
        assert ts.bits(syms) == pytest.approx(k * syms.size)
        code = ts.encode(syms)
        assert len(code) * 8 <= k * syms.size * 1.01 + 64 + 64

    def test_matches_cross_entropy(self):
        rng = np.random.default_rng(7)
        t = _random_table(rng, width=40)
        ts = TableSet([t])
        syms = _draw(rng, t, 100_000)
        info = -np.sum(np.log2(t.pmf()[syms - t.sym_min]))
        code = ts.encode(syms)
        assert len(code) * 8 <= info * 1.01 + 64 + 64

    def test_bits_additive_over_split(self):
        rng = np.random.default_rng(8)
        t = _random_table(rng, width=30)
        ts = TableSet([t])
        syms = _draw(rng, t, 1000)
        total = ts.bits(syms)
        assert total == pytest.approx(ts.bits(syms[:400]) + ts.bits(syms[400:]))

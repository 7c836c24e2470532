import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpcodec.errors import CorruptStream
from gpcodec.rangecoder import (
    TOTAL,
    FrequencyTable,
    RangeDecoder,
    RangeEncoder,
    cumulative,
    decode_symbol,
    encode_symbol,
    finish,
    quantize_probs,
    quantize_probs_batch,
    table_cost_bits,
)


def largest_remainder(row):
    """Reference apportionment written with plain Python integers and fractions."""
    from fractions import Fraction

    p = [Fraction(x).limit_denominator(10**12) for x in row]
    total = sum(p)
    p = [x / total for x in p]
    spare = TOTAL - len(p)
    base = [int(x * spare) for x in p]
    frac = [x * spare - b for x, b in zip(p, base)]
    left = spare - sum(base)
    order = sorted(range(len(p)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        base[i] += 1
    return [b + 1 for b in base]


def random_tables(rng, n, alphabet):
    probs = rng.dirichlet(np.full(alphabet, 0.3), size=n)
    return quantize_probs_batch(probs)


def round_trip(freqs, symbols):
    enc = RangeEncoder()
    enc.encode_batch(cumulative(freqs), symbols)
    payload = enc.finish()
    dec = RangeDecoder(payload)
    out = dec.decode_batch(cumulative(freqs))
    dec.finish()
    return payload, out, dec


class TestQuantizeProbs:
    def test_half_half(self):
        assert quantize_probs([0.5, 0.5]).freqs.tolist() == [32768, 32768]

    def test_floor_of_one(self):
        assert quantize_probs([1.0, 0.0]).freqs.tolist() == [65535, 1]

    def test_largest_remainder_example(self):
        f = quantize_probs([0.7, 0.2, 0.05, 0.05]).freqs.tolist()
        assert f == [45873, 13107, 3278, 3278]
        assert sum(f) == TOTAL

    def test_ties_go_to_lower_index(self):
        f = quantize_probs([1 / 3, 1 / 3, 1 / 3]).freqs.tolist()
        assert f == largest_remainder([1 / 3, 1 / 3, 1 / 3])
        assert f[0] >= f[1] >= f[2]

    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 16]))
    def test_matches_reference(self, seed, alphabet):
        row = np.random.default_rng(seed).dirichlet(np.full(alphabet, 0.5))
        f = quantize_probs(row).freqs
        assert f.sum() == TOTAL and f.min() >= 1
        assert f.tolist() == largest_remainder(row.tolist())

    def test_deterministic(self, rng):
        p = rng.dirichlet(np.ones(16), size=100)
        assert np.array_equal(quantize_probs_batch(p), quantize_probs_batch(p.copy()))

    def test_invalid_table(self):
        with pytest.raises(ValueError):
            FrequencyTable([0, TOTAL])


class TestRoundTrip:
    def test_small_uniform_binary(self):
        table = FrequencyTable([32768, 32768])
        enc = RangeEncoder()
        for s in [0, 1, 1, 0]:
            encode_symbol(enc, table, s)
        dec = RangeDecoder(finish(enc))
        assert [decode_symbol(dec, table) for _ in range(4)] == [0, 1, 1, 0]

    def test_random_tables_seed_1(self):
        rng = np.random.default_rng(1)
        freqs = random_tables(rng, 10_000, 16)
        cum = cumulative(freqs)
        u = rng.random(10_000) * TOTAL
        symbols = np.array([np.searchsorted(c, x, side="right") - 1 for c, x in zip(cum, u)])
        _, out, _ = round_trip(freqs, symbols)
        assert np.array_equal(out, symbols)

    def test_empty_sequence(self):
        payload = RangeEncoder().finish()
        assert len(payload) <= 8
        dec = RangeDecoder(payload)
        assert dec.decode_batch(np.zeros((0, 3), dtype=np.int64)).size == 0
        dec.finish()

    def test_million_symbols_mixed_alphabets(self):
        rng = np.random.default_rng(2)
        total = 0
        enc = RangeEncoder()
        parts = []
        for alphabet in (2, 4, 16, 2, 16):
            n = 200_000
            freqs = random_tables(rng, n, alphabet)
            p = freqs / TOTAL
            symbols = (p.cumsum(axis=1) < rng.random((n, 1))).sum(axis=1)
            enc.encode_batch(cumulative(freqs), symbols)
            parts.append((freqs, symbols))
            total += n
        dec = RangeDecoder(enc.finish())
        for freqs, symbols in parts:
            assert np.array_equal(dec.decode_batch(cumulative(freqs)), symbols)
        dec.finish()
        assert total >= 1_000_000

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3000), st.sampled_from([2, 4, 16]))
    def test_property(self, seed, n, alphabet):
        rng = np.random.default_rng(seed)
        freqs = random_tables(rng, n, alphabet)
        symbols = rng.integers(0, alphabet, n)
        payload, out, dec = round_trip(freqs, symbols)
        assert np.array_equal(out, symbols)
        assert dec.consumed == len(payload)
        assert 8 * len(payload) <= table_cost_bits(freqs, symbols) + 64

    def test_extreme_tables(self):
        # symbols forced onto the floor-of-one slot and onto the dominant slot
        freqs = np.tile([[TOTAL - 1, 1]], (5000, 1))
        symbols = np.arange(5000) % 2
        _, out, _ = round_trip(freqs, symbols)
        assert np.array_equal(out, symbols)


class TestRate:
    def test_uniform_binary_bytes(self):
        freqs = np.full((8192, 2), TOTAL // 2)
        symbols = np.random.default_rng(3).integers(0, 2, 8192)
        payload, _, _ = round_trip(freqs, symbols)
        assert 1024 <= len(payload) <= 1024 + 8

    def test_near_certain_symbols(self):
        freqs = np.tile([[TOTAL - 1, 1]], (10_000, 1))
        payload, _, _ = round_trip(freqs, np.zeros(10_000, dtype=np.int64))
        assert len(payload) <= 8

    def test_accounting_bound(self, rng):
        freqs = random_tables(rng, 50_000, 4)
        symbols = rng.integers(0, 4, 50_000)
        payload, _, _ = round_trip(freqs, symbols)
        assert 8 * len(payload) <= table_cost_bits(freqs, symbols) + 64


class TestCorruption:
    def test_truncated_payload(self, rng):
        freqs = random_tables(rng, 5000, 16)
        symbols = rng.integers(0, 16, 5000)
        payload, _, _ = round_trip(freqs, symbols)
        dec = RangeDecoder(payload[: len(payload) // 2])
        with pytest.raises(CorruptStream):
            dec.decode_batch(cumulative(freqs))

    def test_trailing_bytes(self):
        freqs = np.full((100, 2), TOTAL // 2)
        enc = RangeEncoder()
        enc.encode_batch(cumulative(freqs), np.ones(100, dtype=np.int64))
        dec = RangeDecoder(enc.finish() + bytes(range(1, 17)))
        dec.decode_batch(cumulative(freqs))
        with pytest.raises(CorruptStream):
            dec.finish()

    def test_encoder_single_use(self):
        enc = RangeEncoder()
        enc.finish()
        with pytest.raises(RuntimeError):
            enc.encode(FrequencyTable([TOTAL // 2, TOTAL // 2]), 0)

    def test_symbol_outside_alphabet(self):
        with pytest.raises(ValueError):
            RangeEncoder().encode(FrequencyTable([TOTAL // 2, TOTAL // 2]), 2)

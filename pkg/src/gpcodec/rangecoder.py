"""Byte-renormalizing range coder over 16-bit frequency tables.

The coder keeps a 56-bit range inside 64-bit integers and resolves carries
with a cached byte plus a count of pending 0xFF bytes.  The encoder drops the
leading byte (it is always zero) and the decoder treats up to
``MAX_VIRTUAL`` bytes past the end of the payload as zeros, which lets
``finish`` trim its flush to the bytes that carry information.

Batch kernels encode or decode one symbol per table row; they are what the
codec calls for a whole stage pass.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import CorruptStream

__all__ = [
    "PRECISION",
    "TOTAL",
    "FrequencyTable",
    "quantize_probs",
    "quantize_probs_batch",
    "cumulative",
    "table_cost_bits",
    "RangeEncoder",
    "RangeDecoder",
    "encode_symbol",
    "decode_symbol",
    "finish",
]

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 56
_BOT = 1 << 48
_FF_LOW = 0xFF << 48
_WINDOW_BYTES = 7
MAX_VIRTUAL = _WINDOW_BYTES


class FrequencyTable:
    """Integer symbol frequencies summing to ``TOTAL``, each at least 1."""

    __slots__ = ("freqs", "cum")

    def __init__(self, freqs):
        f = np.asarray(freqs, dtype=np.int64).reshape(-1)
        if f.size < 1 or np.any(f < 1) or int(f.sum()) != TOTAL:
            raise ValueError("frequencies must be >= 1 and sum to 2**16")
        self.freqs = f
        self.cum = np.concatenate([[0], np.cumsum(f)]).astype(np.int64)

    def __len__(self) -> int:
        return len(self.freqs)

    def __eq__(self, other) -> bool:
        return isinstance(other, FrequencyTable) and np.array_equal(self.freqs, other.freqs)

    def __repr__(self) -> str:
        return f"FrequencyTable({self.freqs.tolist()})"


def quantize_probs_batch(probs: np.ndarray) -> np.ndarray:
    """Largest-remainder quantization of probability rows to ``TOTAL``.

    Every symbol first receives one count; the remaining ``TOTAL - A`` counts
    are apportioned by floor of ``p * (TOTAL - A)`` and the leftover goes to
    the largest fractional parts, ties to the lower symbol index.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    n, a = p.shape
    p = np.clip(p, 0.0, None)
    s = p.sum(axis=1, keepdims=True)
    bad = ~(s[:, 0] > 0) | ~np.isfinite(s[:, 0])
    if np.any(bad):
        p[bad] = 1.0
        s[bad] = a
    p = p / s
    spare = TOTAL - a
    scaled = p * spare
    fl = np.floor(scaled)
    frac = scaled - fl
    fl = fl.astype(np.int64)
    rem = spare - fl.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(a)[None, :].repeat(n, axis=0), axis=1)
    return fl + (ranks < rem[:, None]) + 1


def quantize_probs(row) -> FrequencyTable:
    return FrequencyTable(quantize_probs_batch(np.asarray(row))[0])


def cumulative(freqs: np.ndarray) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.int64)
    cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return cum


def table_cost_bits(freqs: np.ndarray, symbols: np.ndarray) -> float:
    """Ideal code length of ``symbols`` under the quantized tables."""
    f = np.take_along_axis(np.asarray(freqs), np.asarray(symbols, dtype=np.int64)[:, None], axis=1)[:, 0]
    return float(np.sum(PRECISION - np.log2(f)))


# state layout: low, range, cache, pending 0xFF bytes, leading byte emitted
@njit(cache=True)
def _shift_low(st, out, pos):
    low = st[0]
    if low < _FF_LOW or low >= _TOP:
        carry = low >> 56
        if st[4] == 1:
            out[pos] = (st[2] + carry) & 0xFF
            pos += 1
        else:
            st[4] = 1
        for _ in range(st[3]):
            out[pos] = (0xFF + carry) & 0xFF
            pos += 1
        st[3] = 0
        st[2] = (low >> 48) & 0xFF
    else:
        st[3] += 1
    st[0] = (low & (_BOT - 1)) << 8
    return pos


@njit(cache=True)
def _encode_kernel(st, cum, sym, out):
    pos = 0
    for i in range(sym.shape[0]):
        s = sym[i]
        c = cum[i, s]
        f = cum[i, s + 1] - c
        r = st[1] >> 16
        st[0] += r * c
        st[1] = r * f
        while st[1] < _BOT:
            st[1] <<= 8
            pos = _shift_low(st, out, pos)
    return pos


@njit(cache=True)
def _flush_kernel(st, out):
    low = st[0]
    rng = st[1]
    # pick the value in [low, low + range) with the most trailing zero bytes
    v = ((low + _TOP - 1) >> 56) << 56
    if v >= low + rng:
        v = ((low + _BOT - 1) >> 48) << 48
    st[0] = v
    pos = 0
    for _ in range(_WINDOW_BYTES + 1):
        pos = _shift_low(st, out, pos)
    return pos


# decoder state: code, range, read position, virtual bytes consumed
@njit(cache=True)
def _next_byte(st, data):
    p = st[2]
    st[2] = p + 1
    if p < data.shape[0]:
        return np.int64(data[p])
    st[3] += 1
    return np.int64(0)


@njit(cache=True)
def _decode_kernel(st, cum, data, out):
    """Returns number of symbols decoded; fewer than requested means corrupt."""
    n = cum.shape[0]
    a = cum.shape[1] - 1
    for i in range(n):
        r = st[1] >> 16
        v = st[0] // r
        if v >= cum[i, a]:
            return i
        s = 0
        while cum[i, s + 1] <= v:
            s += 1
        st[0] -= r * cum[i, s]
        st[1] = r * (cum[i, s + 1] - cum[i, s])
        while st[1] < _BOT:
            st[0] = (st[0] << 8) | _next_byte(st, data)
            st[1] <<= 8
        if st[3] > _WINDOW_BYTES:
            return i
        out[i] = s
    return n


class RangeEncoder:
    """Single-session encoder; call :meth:`finish` once to get the payload."""

    def __init__(self):
        self._st = np.array([0, _TOP - 1, 0, 0, 0], dtype=np.int64)
        self._out = bytearray()
        self._done = False
        self.symbols = 0

    def encode_batch(self, cum: np.ndarray, symbols: np.ndarray) -> None:
        if self._done:
            raise RuntimeError("encoder already finished")
        cum = np.ascontiguousarray(cum, dtype=np.int64)
        symbols = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
        if cum.ndim != 2 or cum.shape[0] != symbols.shape[0]:
            raise ValueError("one table row per symbol required")
        if symbols.size == 0:
            return
        if symbols.min() < 0 or symbols.max() >= cum.shape[1] - 1:
            raise ValueError("symbol outside table alphabet")
        buf = np.empty(3 * symbols.size + int(self._st[3]) + 16, dtype=np.uint8)
        n = _encode_kernel(self._st, cum, symbols, buf)
        self._out += buf[:n].tobytes()
        self.symbols += symbols.size

    def encode(self, table: FrequencyTable, symbol: int) -> None:
        self.encode_batch(table.cum[None, :], np.array([symbol]))

    def finish(self) -> bytes:
        if not self._done:
            buf = np.empty(int(self._st[3]) + _WINDOW_BYTES + 8, dtype=np.uint8)
            n = _flush_kernel(self._st, buf)
            tail = buf[:n].tobytes()
            trimmed = tail.rstrip(b"\x00")
            # the decoder pads at most MAX_VIRTUAL zero bytes
            if len(tail) - len(trimmed) > MAX_VIRTUAL:
                trimmed = tail[: len(tail) - MAX_VIRTUAL]
            self._out += trimmed
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8).copy()
        self._st = np.array([0, _TOP - 1, 0, 0], dtype=np.int64)
        code = 0
        for _ in range(_WINDOW_BYTES):
            code = (code << 8) | int(_next_byte(self._st, self._data))
        self._st[0] = code
        if self._st[3] > _WINDOW_BYTES or code >= self._st[1]:
            raise CorruptStream("payload too short")

    def decode_batch(self, cum: np.ndarray) -> np.ndarray:
        cum = np.ascontiguousarray(cum, dtype=np.int64)
        out = np.zeros(cum.shape[0], dtype=np.int64)
        if cum.shape[0] == 0:
            return out
        n = _decode_kernel(self._st, cum, self._data, out)
        if n != cum.shape[0]:
            raise CorruptStream("range decoder ran past the payload")
        return out

    def decode(self, table: FrequencyTable) -> int:
        return int(self.decode_batch(table.cum[None, :])[0])

    @property
    def consumed(self) -> int:
        """Real payload bytes read so far."""
        return min(int(self._st[2]), len(self._data))

    def finish(self) -> None:
        """Raise if real bytes remain beyond the decoder's read window.

        Bytes appended inside the lookahead window cannot be told apart from
        payload here; the container checksum covers that case.
        """
        if int(self._st[2]) < len(self._data):
            raise CorruptStream("trailing bytes after payload")


def encode_symbol(state: RangeEncoder, table: FrequencyTable, symbol: int) -> None:
    state.encode(table, symbol)


def decode_symbol(state: RangeDecoder, table: FrequencyTable) -> int:
    return state.decode(table)


def finish(state: RangeEncoder) -> bytes:
    return state.finish()

"""Byte-aligned renormalizing range coder over 64-bit integer state.

Carry-less variant: a byte is emitted only once it can no longer change,
either because ``low`` and ``low + range`` share their top byte, or after the
underflow truncation ``range = -low & (BOTTOM - 1)`` forces that condition.
The coder consumes only integer frequency tables (fixed-point PMFs), so
identical inputs produce identical bitstreams on every platform.

State invariants maintained throughout:
  * low + range <= 2**64 (no carry can propagate into emitted bytes)
  * after renormalization, range >= BOTTOM, so ``range // total`` never
    truncates to zero for table totals <= BOTTOM.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import CodingError

__all__ = ["encode_core", "decode_core", "encode_symbols", "decode_symbols"]

_TOP = np.uint64(1) << np.uint64(56)
_BOT = np.uint64(1) << np.uint64(48)
_U64_MAX = np.uint64(0xFFFFFFFFFFFFFFFF)
_ZERO = np.uint64(0)
_ONE = np.uint64(1)
_EIGHT = np.uint64(8)
_FLUSH_BYTES = 8


@numba.njit(cache=True)
def encode_core(symbols, table_ids, tbl_base, sym_min, width, cums, total, out):
    """Encode ``symbols`` (one PMF table per symbol) into ``out``.

    Returns the number of bytes written, or -1 if a symbol falls outside its
    table's support.  ``cums`` holds the concatenated cumulative tables;
    table t spans cums[tbl_base[t] : tbl_base[t] + width[t] + 1].
    """
    low = _ZERO
    rng = _U64_MAX
    pos = 0
    tot = np.uint64(total)
    for i in range(symbols.size):
        tid = table_ids[i]
        s = symbols[i] - sym_min[tid]
        if s < 0 or s >= width[tid]:
            return -1
        base = tbl_base[tid]
        c = np.uint64(cums[base + s])
        f = np.uint64(cums[base + s + 1]) - c
        r = rng // tot
        low = low + r * c
        rng = r * f
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (_ZERO - low) & (_BOT - _ONE)
            else:
                break
            out[pos] = np.uint8(low >> np.uint64(56))
            pos += 1
            low = low << _EIGHT
            rng = rng << _EIGHT
    for _ in range(_FLUSH_BYTES):
        out[pos] = np.uint8(low >> np.uint64(56))
        pos += 1
        low = low << _EIGHT
    return pos


@numba.njit(cache=True)
def decode_core(data, count, table_ids, tbl_base, sym_min, width, cums, total, out):
    """Decode ``count`` symbols from ``data``; mirrors :func:`encode_core`.

    Returns bytes consumed, or -1 on a truncated stream.
    """
    low = _ZERO
    rng = _U64_MAX
    code = _ZERO
    pos = 0
    n = data.size
    tot = np.uint64(total)
    for _ in range(_FLUSH_BYTES):
        if pos >= n:
            return -1
        code = (code << _EIGHT) | np.uint64(data[pos])
        pos += 1
    for i in range(count):
        tid = table_ids[i]
        base = tbl_base[tid]
        w = width[tid]
        r = rng // tot
        dv = (code - low) // r
        if dv >= tot:
            dv = tot - _ONE
        lo = 0
        hi = w
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if np.uint64(cums[base + mid]) <= dv:
                lo = mid
            else:
                hi = mid
        c = np.uint64(cums[base + lo])
        f = np.uint64(cums[base + lo + 1]) - c
        out[i] = lo + sym_min[tid]
        low = low + r * c
        rng = r * f
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (_ZERO - low) & (_BOT - _ONE)
            else:
                break
            if pos >= n:
                return -1
            code = (code << _EIGHT) | np.uint64(data[pos])
            pos += 1
            low = low << _EIGHT
            rng = rng << _EIGHT
    return pos


def encode_symbols(symbols, table_ids, tbl_base, sym_min, width, cums, total) -> bytes:
    """Python-facing wrapper around :func:`encode_core`."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    table_ids = np.ascontiguousarray(table_ids, dtype=np.int64)
    if symbols.size != table_ids.size:
        raise CodingError("one table id required per symbol")
    # worst case ~2 bytes/symbol at 16-bit precision plus rare truncation waste
    out = np.empty(4 * symbols.size + 2 * _FLUSH_BYTES, dtype=np.uint8)
    n = encode_core(symbols, table_ids, tbl_base, sym_min, width, cums, total, out)
    if n < 0:
        raise CodingError("symbol outside its table's support")
    return out[:n].tobytes()


def decode_symbols(data: bytes, count: int, table_ids, tbl_base, sym_min, width, cums, total) -> np.ndarray:
    """Python-facing wrapper around :func:`decode_core`."""
    table_ids = np.ascontiguousarray(table_ids, dtype=np.int64)
    if count != table_ids.size:
        raise CodingError("one table id required per symbol")
    buf = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(count, dtype=np.int64)
    used = decode_core(buf, count, table_ids, tbl_base, sym_min, width, cums, total, out)
    if used < 0:
        raise CodingError("truncated bitstream")
    return out

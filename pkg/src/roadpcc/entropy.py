"""Adaptive multi-symbol range coder with per-context frequency tables.

The coder keeps a 32-bit range and a 33-bit ``low`` with deferred carry
propagation (the byte-oriented scheme popularised by LZMA), but codes
symbols from an arbitrary alphabet against cumulative frequencies instead
of binary probabilities.

Model: every context owns a frequency table. After a symbol is coded its
count grows by :data:`INCREMENT`; when a table's total exceeds
:data:`MAX_TOTAL` all counts are halved (rounding up, so nothing reaches
zero). With a single context the table starts at 1 per symbol. With
several contexts a shared table accumulates every coded symbol, and a
context's table is seeded from it on first use (and again on first use
after each caller-declared segment boundary): shared counts shifted right
until their total is at most :data:`SEED_TOTAL`, then OR-ed with 1.
Encoder and decoder apply identical updates, so no table is transmitted.

Stream format: the raw coder output, nothing else. The caller must know
how many symbols to decode and in which contexts.
"""

from __future__ import annotations

import numba
import numpy as np

from roadpcc.errors import CorruptPayload

INCREMENT = 32
MAX_TOTAL = 1 << 16
SEED_TOTAL = 1 << 10
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@numba.njit(cache=True, nogil=True)
def _new_tables(n_contexts, alphabet):
    freq = np.ones((n_contexts, alphabet), dtype=np.int64)
    tot = np.full(n_contexts, alphabet, dtype=np.int64)
    return freq, tot


@numba.njit(cache=True, nogil=True)
def _update(freq, tot, ctx, sym, alphabet):
    freq[ctx, sym] += INCREMENT
    tot[ctx] += INCREMENT
    if tot[ctx] > MAX_TOTAL:
        t = 0
        for k in range(alphabet):
            f = (freq[ctx, k] + 1) >> 1
            freq[ctx, k] = f
            t += f
        tot[ctx] = t


@numba.njit(cache=True, nogil=True)
def _seed_context(freq, tot, ctx, shared, shared_tot, alphabet):
    # scale the shared counts down to at most SEED_TOTAL, keeping every
    # count >= 1, so the new context adapts quickly
    shift = 0
    while (shared_tot[0] >> shift) > SEED_TOTAL:
        shift += 1
    t = 0
    for k in range(alphabet):
        f = (shared[0, k] >> shift) | 1
        freq[ctx, k] = f
        t += f
    tot[ctx] = t


@numba.njit(cache=True, nogil=True)
def _encode(symbols, contexts, n_contexts, alphabet, inherit, resets):
    n = symbols.shape[0]
    out = np.empty(3 * n + 16, dtype=np.uint8)
    op = 0
    freq, tot = _new_tables(n_contexts, alphabet)
    shared, shared_tot = _new_tables(1, alphabet)
    used = np.zeros(n_contexts, dtype=np.bool_)
    low = np.int64(0)
    rng = np.int64(_MASK32)
    cache = np.int64(0)
    cache_size = np.int64(1)
    ri = 0
    for i in range(n + 5):
        if i < n:
            while ri < resets.shape[0] and resets[ri] <= i:
                used[:] = False
                ri += 1
            s = symbols[i]
            c = contexts[i]
            if inherit and not used[c]:
                _seed_context(freq, tot, c, shared, shared_tot, alphabet)
            used[c] = True
            cum = np.int64(0)
            for k in range(s):
                cum += freq[c, k]
            r = rng // tot[c]
            low += r * cum
            rng = r * freq[c, s]
            _update(freq, tot, c, s, alphabet)
            if inherit:
                _update(shared, shared_tot, 0, s, alphabet)
            shifts = 0
            while rng < _TOP:
                rng <<= 8
                shifts += 1
        else:
            shifts = 1  # flush: push out the remaining bytes of low
        for _ in range(shifts):
            if low < 0xFF000000 or low > _MASK32:
                carry = low >> 32
                temp = cache
                while True:
                    out[op] = (temp + carry) & 0xFF
                    op += 1
                    temp = 0xFF
                    cache_size -= 1
                    if cache_size == 0:
                        break
                cache = (low >> 24) & 0xFF
            cache_size += 1
            low = (low & 0x00FFFFFF) << 8
    # The first emitted byte is always the zero initial cache; drop it.
    return out[1:op].copy()


@numba.njit(cache=True, nogil=True)
def _decode_batch(data, state, freq, tot, shared, shared_tot, used, inherit, contexts, alphabet, out):
    code = state[0]
    rng = state[1]
    pos = state[2]
    nd = data.shape[0]
    for i in range(contexts.shape[0]):
        c = contexts[i]
        if inherit and not used[c]:
            _seed_context(freq, tot, c, shared, shared_tot, alphabet)
        used[c] = True
        r = rng // tot[c]
        v = code // r
        if v >= tot[c]:
            return -1
        s = 0
        cum = np.int64(0)
        while cum + freq[c, s] <= v:
            cum += freq[c, s]
            s += 1
        code -= r * cum
        rng = r * freq[c, s]
        _update(freq, tot, c, s, alphabet)
        if inherit:
            _update(shared, shared_tot, 0, s, alphabet)
        while rng < _TOP:
            b = 0
            if pos < nd:
                b = data[pos]
            pos += 1
            code = ((code << 8) | b) & _MASK32
            rng <<= 8
        out[i] = s
    state[0] = code
    state[1] = rng
    state[2] = pos
    return 0


def _as_contexts(contexts, n: int) -> np.ndarray:
    if contexts is None:
        return np.zeros(n, dtype=np.int64)
    ctx = np.ascontiguousarray(contexts, dtype=np.int64)
    if ctx.shape != (n,):
        raise ValueError(f"need {n} contexts, got shape {ctx.shape}")
    return ctx


def encode_symbols(
    symbols, contexts=None, *, alphabet: int = 256, n_contexts: int = 1, segments=None
) -> bytes:
    """Range-code ``symbols`` (ints in ``[0, alphabet)``) in the given contexts.

    ``segments`` optionally lists the lengths of consecutive symbol runs;
    at the start of each run every context is re-seeded from the shared
    table on its next use. The decoder must pass ``reseed=True`` to
    :meth:`SymbolDecoder.decode` at the same points.
    """
    sym = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
    ctx = _as_contexts(contexts, sym.shape[0])
    if not 1 <= alphabet <= 4096:
        raise ValueError("alphabet must be in [1, 4096]")
    if sym.size and (sym.min() < 0 or sym.max() >= alphabet):
        raise ValueError(f"symbol outside alphabet [0, {alphabet})")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= n_contexts):
        raise ValueError(f"context outside [0, {n_contexts})")
    if segments is None:
        resets = np.zeros(0, dtype=np.int64)
    else:
        seg = np.asarray(segments, dtype=np.int64)
        if seg.sum() != sym.shape[0] or (seg < 0).any():
            raise ValueError("segment lengths must be non-negative and sum to the symbol count")
        resets = np.concatenate([[0], np.cumsum(seg)[:-1]]).astype(np.int64)
    return _encode(sym, ctx, n_contexts, alphabet, n_contexts > 1, resets).tobytes()


class SymbolDecoder:
    """Incremental decoder: call :meth:`decode` repeatedly with the contexts
    of the next batch of symbols, then :meth:`finish` to verify the stream
    was consumed exactly."""

    def __init__(self, data: bytes, *, alphabet: int = 256, n_contexts: int = 1) -> None:
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        self.alphabet = alphabet
        self.n_contexts = n_contexts
        self._freq, self._tot = _new_tables(n_contexts, alphabet)
        self._shared, self._shared_tot = _new_tables(1, alphabet)
        self._used = np.zeros(n_contexts, dtype=np.bool_)
        code = 0
        for b in self._data[:4]:
            code = (code << 8) | int(b)
        code <<= 8 * max(0, 4 - self._data.shape[0])
        self._state = np.array([code, _MASK32, 4], dtype=np.int64)

    def decode(self, contexts=None, count: int | None = None, reseed: bool = False) -> np.ndarray:
        if contexts is None:
            if count is None:
                raise ValueError("give contexts or a symbol count")
            ctx = np.zeros(count, dtype=np.int64)
        else:
            ctx = np.ascontiguousarray(contexts, dtype=np.int64).reshape(-1)
            if ctx.size and (ctx.min() < 0 or ctx.max() >= self.n_contexts):
                raise ValueError("context out of range")
        if reseed:
            self._used[:] = False
        out = np.empty(ctx.shape[0], dtype=np.int64)
        err = _decode_batch(
            self._data, self._state, self._freq, self._tot, self._shared, self._shared_tot,
            self._used, self.n_contexts > 1, ctx, self.alphabet, out,
        )
        if err:
            raise CorruptPayload("entropy stream decodes outside the model")
        if self._state[2] > self._data.shape[0]:
            raise CorruptPayload("entropy stream exhausted early")
        return out

    @property
    def consumed(self) -> int:
        return int(self._state[2])

    def finish(self) -> None:
        if self.consumed != self._data.shape[0]:
            raise CorruptPayload(
                f"entropy stream length {self._data.shape[0]} != consumed {self.consumed}"
            )


def decode_symbols(
    data: bytes, count: int | None = None, contexts=None, *, alphabet: int = 256, n_contexts: int = 1
) -> np.ndarray:
    dec = SymbolDecoder(data, alphabet=alphabet, n_contexts=n_contexts)
    out = dec.decode(contexts, count)
    dec.finish()
    return out


def shannon_bits(symbols) -> float:
    """Order-0 empirical entropy of ``symbols`` in bits (histogram bound)."""
    sym = np.asarray(symbols).reshape(-1)
    if sym.size == 0:
        return 0.0
    _, counts = np.unique(sym, return_counts=True)
    p = counts / sym.size
    return float(-(counts * np.log2(p)).sum())

"""Compiled inner loops for autoregressive grid coding.

The same scalar routines serve the encoder, the decoder and the pure-Python
coder in :mod:`voxcodec.rangecoder`, so all three agree bit for bit.
"""

import math

import numpy as np
from numba import njit

from .entropy import (
    CONTEXT_NORM, LOG_B_MIN, LOG_B_STEP, MU_RESOLUTION, N_CONTEXT, N_SCALES, N_SPATIAL,
    SCALE_TABLE, SPATIAL_OFFSETS, SYMBOL_MAX, SYMBOL_MIN, TEMPORAL_OFFSETS, B_MAX,
)

PREC_BITS = 24
TOTAL = 1 << PREC_BITS
N_SYMBOLS = SYMBOL_MAX - SYMBOL_MIN + 1
SPREAD = TOTAL - N_SYMBOLS      # mass shared out by the CDF; the rest is 1 per symbol

RANGE_BITS = 48
RANGE_INIT = (1 << RANGE_BITS) - 1
RANGE_TOP = 1 << (RANGE_BITS - 8)
LOW_MASK = (1 << RANGE_BITS) - 1
SHIFT_MASK = (1 << (RANGE_BITS - 8)) - 1
FLUSH_BYTES = RANGE_BITS // 8 + 1

LOG_B_MAX = math.log(B_MAX)
_SPATIAL = SPATIAL_OFFSETS.astype(np.int64)
_TEMPORAL = TEMPORAL_OFFSETS.astype(np.int64)
_SCALES = SCALE_TABLE.copy()

OK, ERR_ALPHABET, ERR_DIVERGED, ERR_TRUNCATED, ERR_CORRUPT = 0, 1, 2, 3, 4


@njit(cache=True)
def laplace_cum(s, mu, b):
    """Cumulative frequency of symbol ``s`` (``SYMBOL_MIN <= s <= SYMBOL_MAX + 1``)."""
    if s <= SYMBOL_MIN:
        return 0
    if s > SYMBOL_MAX:
        return TOTAL
    z = (s - 0.5 - mu) / b
    if z < 0.0:
        f = 0.5 * math.exp(z)
    else:
        f = 1.0 - 0.5 * math.exp(-z)
    return (s - SYMBOL_MIN) + int(math.floor(f * SPREAD))


@njit(cache=True)
def laplace_cum_table(mu, b):
    out = np.empty(N_SYMBOLS + 1, dtype=np.int64)
    for i in range(N_SYMBOLS + 1):
        out[i] = laplace_cum(SYMBOL_MIN + i, mu, b)
    return out


@njit(cache=True)
def laplace_find(target, mu, b):
    """Symbol ``s`` with ``cum(s) <= target < cum(s + 1)``."""
    lo = SYMBOL_MIN
    hi = SYMBOL_MAX + 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if laplace_cum(mid, mu, b) <= target:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def predict_discrete(ctx, W1, b1, W2, b2, out):
    """Fixed-order MLP evaluation + lattice snapping; writes (mu, b) into ``out``."""
    hidden = W1.shape[1]
    mu_raw = b2[0]
    log_b = b2[1]
    for j in range(hidden):
        acc = b1[j]
        for k in range(N_CONTEXT):
            acc += ctx[k] * W1[k, j]
        if acc > 0.0:
            mu_raw += acc * W2[j, 0]
            log_b += acc * W2[j, 1]
    if not (math.isfinite(mu_raw) and math.isfinite(log_b)):
        return False
    mu_raw = min(max(mu_raw, float(SYMBOL_MIN)), float(SYMBOL_MAX))
    mu_i = math.floor(mu_raw * MU_RESOLUTION + 0.5)
    log_b = min(max(log_b, LOG_B_MIN), LOG_B_MAX)
    k = int(math.floor((log_b - LOG_B_MIN) / LOG_B_STEP + 0.5))
    k = min(max(k, 0), N_SCALES - 1)
    out[0] = mu_i / MU_RESOLUTION
    out[1] = _SCALES[k]
    return True


@njit(cache=True)
def _context(vols, prev, has_prev, c, z, y, x, ctx):
    nz, ny, nx = vols.shape[1], vols.shape[2], vols.shape[3]
    for n in range(N_SPATIAL):
        zz = z + _SPATIAL[n, 0]
        yy = y + _SPATIAL[n, 1]
        xx = x + _SPATIAL[n, 2]
        if 0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx:
            ctx[n] = vols[c, zz, yy, xx] / CONTEXT_NORM
        else:
            ctx[n] = 0.0
    for n in range(27):
        v = 0.0
        if has_prev:
            zz = z + _TEMPORAL[n, 0]
            yy = y + _TEMPORAL[n, 1]
            xx = x + _TEMPORAL[n, 2]
            if 0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx:
                v = prev[c, zz, yy, xx] / CONTEXT_NORM
        ctx[N_SPATIAL + n] = v


@njit(cache=True)
def volume_params(vols, prev, has_prev, W1, b1, W2, b2):
    """Discretised (mu, b) for every voxel, with contexts taken from ``vols``."""
    nc, nz, ny, nx = vols.shape
    mu = np.empty(vols.size)
    bb = np.empty(vols.size)
    ctx = np.empty(N_CONTEXT)
    out = np.empty(2)
    i = 0
    for c in range(nc):
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    _context(vols, prev, has_prev, c, z, y, x, ctx)
                    if not predict_discrete(ctx, W1, b1, W2, b2, out):
                        return mu, bb, False
                    mu[i] = out[0]
                    bb[i] = out[1]
                    i += 1
    return mu, bb, True


# ---------------------------------------------------------------- range coder core
# enc state: [low, range, cache, cache_size, n_out]; dec state: [code, range, pos]


@njit(cache=True)
def enc_init(state):
    state[0] = 0
    state[1] = RANGE_INIT
    state[2] = 0
    state[3] = 1
    state[4] = 0


@njit(cache=True)
def _shift_low(state, out):
    low = state[0]
    if (low & LOW_MASK) < (0xFF << (RANGE_BITS - 8)) or (low >> RANGE_BITS) != 0:
        carry = low >> RANGE_BITS
        temp = state[2]
        while True:
            out[state[4]] = (temp + carry) & 0xFF
            state[4] += 1
            temp = 0xFF
            state[3] -= 1
            if state[3] == 0:
                break
        state[2] = (low >> (RANGE_BITS - 8)) & 0xFF
    state[3] += 1
    state[0] = (low & SHIFT_MASK) << 8


@njit(cache=True)
def enc_put(state, out, cum, freq):
    r = state[1] >> PREC_BITS
    state[0] += r * cum
    state[1] = r * freq
    while state[1] < RANGE_TOP:
        state[1] <<= 8
        _shift_low(state, out)


@njit(cache=True)
def enc_flush(state, out):
    for _ in range(FLUSH_BYTES):
        _shift_low(state, out)


@njit(cache=True)
def dec_init(state, data):
    if len(data) < FLUSH_BYTES:
        return False
    state[0] = 0
    state[1] = RANGE_INIT
    for i in range(1, FLUSH_BYTES):
        state[0] = (state[0] << 8) | data[i]
    state[2] = FLUSH_BYTES
    return data[0] == 0


@njit(cache=True)
def dec_target(state):
    """Scaled code value; ``>= TOTAL`` only for corrupt input."""
    return state[0] // (state[1] >> PREC_BITS)


@njit(cache=True)
def dec_advance(state, data, cum, freq):
    r = state[1] >> PREC_BITS
    state[0] -= r * cum
    state[1] = r * freq
    while state[1] < RANGE_TOP:
        if state[2] >= len(data):
            return False
        state[0] = (state[0] << 8) | data[state[2]]
        state[2] += 1
        state[1] <<= 8
    return True


# ---------------------------------------------------------------- grid coding


@njit(cache=True)
def encode_volumes(vols, prev, has_prev, W1, b1, W2, b2):
    out = np.zeros(3 * vols.size + 64, dtype=np.uint8)
    state = np.zeros(5, dtype=np.int64)
    enc_init(state)
    nc, nz, ny, nx = vols.shape
    ctx = np.empty(N_CONTEXT)
    par = np.empty(2)
    for c in range(nc):
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    s = vols[c, z, y, x]
                    if s < SYMBOL_MIN or s > SYMBOL_MAX:
                        return out[:0], ERR_ALPHABET
                    _context(vols, prev, has_prev, c, z, y, x, ctx)
                    if not predict_discrete(ctx, W1, b1, W2, b2, par):
                        return out[:0], ERR_DIVERGED
                    lo = laplace_cum(s, par[0], par[1])
                    hi = laplace_cum(s + 1, par[0], par[1])
                    enc_put(state, out, lo, hi - lo)
    enc_flush(state, out)
    return out[:state[4]], OK


@njit(cache=True)
def decode_volumes(data, shape, prev, has_prev, W1, b1, W2, b2):
    vols = np.zeros((shape[0], shape[1], shape[2], shape[3]), dtype=np.int64)
    state = np.zeros(3, dtype=np.int64)
    if not dec_init(state, data):
        return vols, ERR_TRUNCATED
    ctx = np.empty(N_CONTEXT)
    par = np.empty(2)
    for c in range(shape[0]):
        for z in range(shape[1]):
            for y in range(shape[2]):
                for x in range(shape[3]):
                    _context(vols, prev, has_prev, c, z, y, x, ctx)
                    if not predict_discrete(ctx, W1, b1, W2, b2, par):
                        return vols, ERR_DIVERGED
                    target = dec_target(state)
                    if target >= TOTAL:
                        return vols, ERR_CORRUPT
                    s = laplace_find(target, par[0], par[1])
                    lo = laplace_cum(s, par[0], par[1])
                    hi = laplace_cum(s + 1, par[0], par[1])
                    if not dec_advance(state, data, lo, hi - lo):
                        return vols, ERR_TRUNCATED
                    vols[c, z, y, x] = s
    if state[2] != len(data):
        return vols, ERR_CORRUPT
    return vols, OK

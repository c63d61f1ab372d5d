"""Compiled accumulation loops.

Each kernel accumulates strictly in the order given by a permutation array and
rounds after every multiply and every add (never fused).  Two flavours are
built from one template: ``*_native`` works on float32/float64 arrays in their
own arithmetic; ``*_half`` works on float32 arrays holding binary16 values and
rounds every intermediate to binary16.  A product of two binary16 values is
exact in binary32, and for a sum the binary32 rounding followed by the
binary16 rounding equals the direct binary16 rounding (24 >= 2*11 + 1), so
every result is the correctly rounded binary16 one.
"""

import math

import numpy as np
from numba import njit

_SPLIT = 4398046511105.0  # 2^42 + 1: Veltkamp split keeping 11 significant bits
_HALF_MIN_NORMAL = 6.103515625e-05  # 2^-14
_HALF_MAX = 65504.0
_SUBNORMAL_MAGIC = 268435456.0  # 2^28: x + 2^28 - 2^28 rounds to a multiple of 2^-24
_SPLIT32 = np.float32(8193.0)
_MAGIC32 = np.float32(0.5)
_HALF_MIN_NORMAL32 = np.float32(_HALF_MIN_NORMAL)
_HALF_MAX32 = np.float32(_HALF_MAX)
_INF32 = np.float32(np.inf)


@njit(inline="always")
def _keep(x):
    return x


@njit(inline="always")
def _to_half(x):
    # Veltkamp's split rounds to 11 bits, ties to even, when the arithmetic
    # itself rounds to nearest even; written without data-dependent branches
    # so the loops around it vectorise.
    g = _SPLIT * x
    h = g + (x - g)
    ax = abs(x)
    sub = math.copysign((ax + _SUBNORMAL_MAGIC) - _SUBNORMAL_MAGIC, x)
    h = sub if ax < _HALF_MIN_NORMAL else h
    if abs(h) <= _HALF_MAX:
        return h
    return x if x != x else math.copysign(np.inf, x)


@njit(inline="always")
def _to_half32(x):
    # same on binary32 values: 2^13 + 1 keeps 11 of 24 bits, and 2^-1 has an
    # ulp of 2^-24, the binary16 subnormal spacing
    g = _SPLIT32 * x
    h = g + (x - g)
    ax = abs(x)
    sub = np.float32(math.copysign((ax + _MAGIC32) - _MAGIC32, x))
    h = sub if ax < _HALF_MIN_NORMAL32 else h
    h = h if abs(h) <= _HALF_MAX32 else np.float32(math.copysign(_INF32, x))
    return h if ax < _INF32 else x


def _build(rnd):
    @njit(cache=True)
    def matmul(a, b, perm):
        m, kd = a.shape
        n = b.shape[1]
        out = np.zeros((m, n), dtype=a.dtype)
        for i in range(m):
            for t in range(kd):
                k = perm[t]
                aik = a[i, k]
                if t == 0:
                    for j in range(n):
                        out[i, j] = rnd(aik * b[k, j])
                else:
                    for j in range(n):
                        out[i, j] = rnd(out[i, j] + rnd(aik * b[k, j]))
        return out

    @njit(cache=True)
    def sum_rows(x, perm):
        kd, n = x.shape
        out = np.zeros(n, dtype=x.dtype)
        for t in range(kd):
            k = perm[t]
            if t == 0:
                for j in range(n):
                    out[j] = x[k, j]
            else:
                for j in range(n):
                    out[j] = rnd(out[j] + x[k, j])
        return out

    @njit(cache=True)
    def col2im(cols, height, width, perm):
        # cols: (N, OH, OW, C, KH, KW) -> (N, C, H, W); each input pixel sums its
        # contributions over the kernel offsets listed in ``perm``, in that order.
        nb, oh, ow, c, kh, kw = cols.shape
        out = np.zeros((nb, c, height, width), dtype=cols.dtype)
        for b in range(nb):
            for ch in range(c):
                for y in range(height):
                    for x in range(width):
                        first = True
                        acc = out[b, ch, y, x]
                        for t in range(perm.size):
                            q = perm[t]
                            dy = q // kw
                            dx = q - dy * kw
                            oy = y - dy
                            ox = x - dx
                            if oy < 0 or oy >= oh or ox < 0 or ox >= ow:
                                continue
                            v = cols[b, oy, ox, ch, dy, dx]
                            if first:
                                acc = v
                                first = False
                            else:
                                acc = rnd(acc + v)
                        out[b, ch, y, x] = acc
        return out

    return matmul, sum_rows, col2im


matmul_native, sum_rows_native, col2im_native = _build(_keep)
matmul_half, sum_rows_half, col2im_half = _build(_to_half32)


@njit(cache=True)
def round_half_array(x):
    """Round a float64 array to binary16 values (kept as float64)."""
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        out[i] = _to_half(flat[i])
    return out.reshape(x.shape)


_HALF_TABLE = np.arange(65536, dtype=np.uint16).view(np.float16).astype(np.float32)


@njit(cache=True)
def _widen(bits, table):
    out = np.empty(bits.size, dtype=np.float32)
    for i in range(bits.size):
        out[i] = table[bits[i]]
    return out


def half_to_f32(x: np.ndarray) -> np.ndarray:
    """Exact float16 -> float32 (table lookup); returns a contiguous array."""
    x = np.ascontiguousarray(x)
    return _widen(x.view(np.uint16).reshape(-1), _HALF_TABLE).reshape(x.shape)


@njit(cache=True)
def _narrow(bits):
    # bits of float32 values that are exactly representable in binary16
    out = np.empty(bits.size, dtype=np.uint16)
    for i in range(bits.size):
        b = bits[i]
        sign = (b >> 16) & 0x8000
        exp = (b >> 23) & 0xFF
        mant = b & 0x7FFFFF
        if exp == 0xFF:
            h = 0x7C00 | (0x200 if mant != 0 else 0)
        elif exp == 0:
            h = 0
        elif exp >= 113:  # binary16 normal
            h = ((exp - 112) << 10) | (mant >> 13)
        else:  # binary16 subnormal
            h = (mant | 0x800000) >> (126 - exp)
        out[i] = sign | h
    return out


def f32_to_half(x: np.ndarray) -> np.ndarray:
    """float32 holding binary16 values -> float16, by repacking the bits."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    return _narrow(x.view(np.uint32).reshape(-1)).view(np.float16).reshape(x.shape)

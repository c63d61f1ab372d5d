"""Bit-reproducible arithmetic on float16/float32/float64 numpy arrays.

Elementwise arithmetic is plain numpy: for each dtype numpy rounds every
elementary operation to that dtype (float16 goes through float32, which is
wide enough for the double rounding to be harmless).  Anything that sums goes
through this module so that the accumulation order is the one requested.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .precision import SEQUENTIAL, Precision, ReductionOrder


def cast(t, to: Precision) -> np.ndarray:
    """Round to nearest-even into ``to``; overflow becomes +-inf."""
    to = Precision.parse(to)
    with np.errstate(over="ignore"):
        return np.asarray(t).astype(to.dtype)


def _kernel_args(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise TypeError(f"mixed precisions: {dt} and {a.dtype}")
    if dt == np.float16:
        return True, [K.half_to_f32(a) for a in arrays]
    if dt not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dt}")
    return False, [np.ascontiguousarray(a) for a in arrays]


def _finish(out, half):
    return K.f32_to_half(out) if half else out


def _blocks(n: int, order: ReductionOrder):
    """(start, stop) of each contiguous block of a blocked reduction."""
    return [(s, min(s + order.block, n)) for s in range(0, n, order.block)]


def _combine(partials, order: ReductionOrder, key) -> np.ndarray:
    """Add block partial sums in the order's permutation of the blocks."""
    shape = partials[0].shape
    stacked = np.stack([p.reshape(-1) for p in partials])
    perm = ReductionOrder(order.seed).permutation(len(partials), *key)
    half, (a,) = _kernel_args(stacked)
    fn = K.sum_rows_half if half else K.sum_rows_native
    return _finish(fn(a, perm), half).reshape(shape)


def reduce_sum(t, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Sum all elements, rounding after each addition; returns a 0-d array."""
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("empty reduction")
    return sum_rows(t.reshape(-1, 1), order, key).reshape(())


def sum_rows(x, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Column sums of a 2-D array, each accumulated over rows in order."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("sum_rows expects a 2-D array")
    if x.shape[0] == 0:
        raise ValueError("empty reduction")
    if order.blocked(x.shape[0]):
        parts = [sum_rows(x[s:e]) for s, e in _blocks(x.shape[0], order)]
        return _combine(parts, order, key)
    perm = order.permutation(x.shape[0], *key)
    half, (a,) = _kernel_args(x)
    fn = K.sum_rows_half if half else K.sum_rows_native
    return _finish(fn(a, perm), half)


def sum_axis(x, axes, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Sum over ``axes``; the reduced elements are accumulated in row-major order."""
    x = np.asarray(x)
    axes = tuple(sorted(a % x.ndim for a in np.atleast_1d(axes)))
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x, axes + tuple(keep))
    rows = int(np.prod([x.shape[a] for a in axes]))
    out = sum_rows(moved.reshape(rows, -1), order, key)
    return out.reshape([x.shape[a] for a in keep])


def fold(terms, order: ReductionOrder = SEQUENTIAL, key=()):
    """Elementwise sum of a list of equally shaped arrays, term by term."""
    terms = list(terms)
    if not terms:
        raise ValueError("empty reduction")
    if order.blocked(len(terms)):
        parts = [fold(terms[s:e]) for s, e in _blocks(len(terms), order)]
        return _combine([np.asarray(p) for p in parts], order, key)
    idx = order.permutation(len(terms), *key)
    acc = terms[idx[0]]
    for i in idx[1:]:
        acc = acc + terms[i]
    return acc


def matmul(a, b, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.shape[1] == 0:
        raise ValueError("empty reduction")
    if order.blocked(a.shape[1]):
        parts = [matmul(a[:, s:e], b[s:e]) for s, e in _blocks(a.shape[1], order)]
        return _combine(parts, order, key)
    perm = order.permutation(a.shape[1], *key)
    # A short inner loop vectorises badly; (b.T @ a.T).T has the same
    # products summed in the same order, so it is bitwise the same result.
    flip = b.shape[1] < 32 and a.shape[0] > b.shape[1]
    if flip:
        a, b = b.T, a.T
    half, (x, y) = _kernel_args(a, b)
    fn = K.matmul_half if half else K.matmul_native
    out = _finish(fn(x, y, perm), half)
    return np.ascontiguousarray(out.T) if flip else out


def add(t, u) -> np.ndarray:
    t, u = np.asarray(t), np.asarray(u)
    if t.shape != u.shape:
        raise ValueError(f"add shape mismatch: {t.shape} vs {u.shape}")
    return t + u


def mul(t, u) -> np.ndarray:
    t, u = np.asarray(t), np.asarray(u)
    if t.shape != u.shape:
        raise ValueError(f"mul shape mismatch: {t.shape} vs {u.shape}")
    return t * u


def im2col(x, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*OH*OW, C*KH*KW), patch entries in (c, kh, kw) order."""
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (N, C, OH, OW, KH, KW)
    oh, ow = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, shape, kh: int, kw: int, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto an (N, C, H, W) grid."""
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.asarray(cols).reshape(n, oh, ow, c, kh, kw)
    half, (a,) = _kernel_args(cols)
    fn = K.col2im_half if half else K.col2im_native
    if order.blocked(kh * kw):
        offsets = np.arange(kh * kw, dtype=np.int64)
        parts = [_finish(fn(a, h, w, offsets[s:e]), half) for s, e in _blocks(kh * kw, order)]
        return _combine(parts, order, key)
    perm = order.permutation(kh * kw, *key)
    return _finish(fn(a, h, w, perm), half)


def conv2d(x, w, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    ``x`` is (N, C, H, W) or a single (H, W) map; ``w`` is (OC, C, KH, KW) or
    (KH, KW) respectively.  Each output is an inner product over (c, kh, kw)
    accumulated per ``order``.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    squeeze = x.ndim == 2
    if squeeze:
        if w.ndim != 2:
            raise ValueError("2-D input needs a 2-D kernel")
        x = x[None, None]
        w = w[None, None]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    cols = im2col(x, kh, kw)
    out = matmul(cols, w.reshape(oc, -1).T, order, key)
    out = out.reshape(n, h - kh + 1, wd - kw + 1, oc).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0, 0] if squeeze else out

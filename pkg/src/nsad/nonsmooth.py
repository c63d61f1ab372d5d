"""Forward maps and derived programs for the nonsmooth primitives.

These are array-level functions; :mod:`nsad.ops` wraps them as tape ops.
Pooling is non-overlapping with stride equal to the window.  Pool windows are
flattened row-major, so "first index" always means lexicographic order.
Ties are decided by exact equality with the window maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .precision import SEQUENTIAL, ReductionOrder
from .tensor import fold

POOL_KINDS = ("native", "minimal", "hybrid", "normpool-zero", "normpool-uniform")


@dataclass(frozen=True)
class PoolMode:
    """Which derived program a pooling node uses on the backward pass."""

    kind: str = "native"
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValueError(f"unknown pool mode {self.kind!r}; expected one of {POOL_KINDS}")
        if self.kind == "hybrid" and not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"hybrid beta must be finite and >= 0, got {self.beta}")

    @classmethod
    def native(cls):
        return cls("native")

    @classmethod
    def minimal(cls):
        return cls("minimal")

    @classmethod
    def hybrid(cls, beta: float):
        return cls("hybrid", float(beta))

    @classmethod
    def parse(cls, text: str) -> "PoolMode":
        """'native', 'minimal', 'hybrid:10', 'normpool-zero', 'normpool-uniform'."""
        if isinstance(text, PoolMode):
            return text
        text = text.strip().lower()
        if text.startswith("hybrid"):
            _, _, beta = text.partition(":")
            return cls.hybrid(float(beta or 0.0))
        return cls(text)

    @property
    def is_max(self) -> bool:
        return self.kind in ("native", "minimal", "hybrid")

    def __str__(self) -> str:
        return f"hybrid:{self.beta:g}" if self.kind == "hybrid" else self.kind


@dataclass(frozen=True)
class PoolGeometry:
    """An m x n window sliding without overlap over a p x q map."""

    m: int = 2
    n: int = 2

    @property
    def size(self) -> int:
        return self.m * self.n

    def output_shape(self, p: int, q: int) -> tuple[int, int]:
        if p < self.m or q < self.n:
            raise ValueError(f"pool window {self.m}x{self.n} does not fit a {p}x{q} input")
        return p // self.m, q // self.n


def windows(x: np.ndarray, geom: PoolGeometry) -> np.ndarray:
    """(..., P, Q) -> (..., OH, OW, m*n) with row-major window entries."""
    *lead, p, q = x.shape
    oh, ow = geom.output_shape(p, q)
    x = x[..., : oh * geom.m, : ow * geom.n]
    x = x.reshape(*lead, oh, geom.m, ow, geom.n)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3)
    return x.reshape(*lead, oh, ow, geom.size)


def unwindow(w: np.ndarray, geom: PoolGeometry, shape) -> np.ndarray:
    """Inverse of :func:`windows`; entries outside every window are zero."""
    *lead, oh, ow, _ = w.shape
    nd = len(lead)
    x = w.reshape(*lead, oh, ow, geom.m, geom.n)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3).reshape(*lead, oh * geom.m, ow * geom.n)
    if x.shape[-2:] == tuple(shape[-2:]):
        return np.ascontiguousarray(x)
    out = np.zeros(shape, dtype=w.dtype)
    out[..., : oh * geom.m, : ow * geom.n] = x
    return out


# -- max / MaxPool ---------------------------------------------------------

def max_windows(win: np.ndarray):
    """Window maxima and the active mask (entries bitwise equal to the max).

    A window holding a NaN has a NaN maximum; its mask then marks the first
    NaN so every window keeps a nonempty active set.
    """
    flat = win.reshape(-1, win.shape[-1])
    y = flat.max(axis=-1)
    mask = flat == y[:, None]
    empty = np.flatnonzero(~mask.any(axis=-1))
    if empty.size:
        mask[empty, np.argmax(np.isnan(flat[empty]), axis=-1)] = True
    y = y.reshape(win.shape[:-1])
    mask = mask.reshape(win.shape)
    return y, mask


def maxpool_forward(x: np.ndarray, geom: PoolGeometry = PoolGeometry()):
    """MaxPool over the last two axes.

    Returns ``(y, active)`` where ``active`` is a boolean mask of shape
    (..., OH, OW, m*n) marking every entry that attains its window maximum.
    """
    y, mask = max_windows(windows(np.asarray(x), geom))
    return y, mask


def active_set(active: np.ndarray, i: int, j: int, geom: PoolGeometry) -> list[tuple[int, int]]:
    """Active set of window (i, j) of a 2-D pool, as (row, col) offsets in the window."""
    flat = np.flatnonzero(active[i, j])
    return [divmod(int(k), geom.n) for k in flat]


def route_max(g: np.ndarray, mask: np.ndarray, mode: PoolMode) -> np.ndarray:
    """Per-window backward of max: upstream ``g`` (...,) -> window grads (..., s)."""
    if not mode.is_max:
        raise ValueError(f"pool mode {mode} is not a max derived program")
    g = np.asarray(g)
    dt = g.dtype

    def native():
        first = np.argmax(mask, axis=-1)
        out = np.zeros(mask.shape, dtype=dt)
        np.put_along_axis(out, first[..., None], g[..., None], axis=-1)
        return out

    def minimal():
        count = mask.sum(axis=-1).astype(dt)
        share = g / count
        return np.where(mask, share[..., None], np.zeros((), dt))

    if mode.kind == "native" or (mode.kind == "hybrid" and mode.beta == 0):
        return native()
    if mode.kind == "minimal" or mode.beta == 1:
        return minimal()
    one_minus = dt.type(1.0 - mode.beta)
    beta = dt.type(mode.beta)
    nat = native()
    with np.errstate(over="ignore", invalid="ignore"):
        blend = one_minus * nat + beta * minimal()
    # a window with a single active entry has a singleton Jacobian: pass g through
    return np.where((mask.sum(axis=-1) == 1)[..., None], nat, blend)


def maxpool_backward(grad_out, active, geom: PoolGeometry, mode: PoolMode, input_shape=None):
    """Route ``grad_out`` back through a MaxPool whose active mask is ``active``."""
    grad_out = np.asarray(grad_out)
    win = route_max(grad_out, active, mode)
    if input_shape is None:
        input_shape = (*grad_out.shape[:-2], grad_out.shape[-2] * geom.m, grad_out.shape[-1] * geom.n)
    return unwindow(win, geom, input_shape)


def minimal_norm_element(k: int) -> np.ndarray:
    """Weights of the minimum-norm point of the simplex spanned by k unit vectors."""
    return np.full(k, 1.0 / k)


# -- ReLU ------------------------------------------------------------------

def check_relu_s(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"ReLU'(0) must lie in [0, 1], got {s}")
    return s


def relu_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, np.zeros((), x.dtype))


def relu_derivative(x: np.ndarray, s: float) -> np.ndarray:
    """0 where x < 0, 1 where x > 0, s where x == 0."""
    x = np.asarray(x)
    s = check_relu_s(s)
    return np.where(x > 0, 1.0, np.where(x == 0, s, 0.0)).astype(x.dtype)


def relu_backward(x: np.ndarray, g: np.ndarray, s: float) -> np.ndarray:
    x = np.asarray(x)
    g = np.asarray(g)
    s = check_relu_s(s)
    zero = np.zeros((), g.dtype)
    return np.where(x > 0, g, np.where(x == 0, g * g.dtype.type(s), zero))


# -- NormPool --------------------------------------------------------------

def norm_windows(win: np.ndarray, order: ReductionOrder = SEQUENTIAL, key=()) -> np.ndarray:
    """Euclidean norm per window; squares summed in window order per ``order``."""
    return np.sqrt(fold([win[..., k] * win[..., k] for k in range(win.shape[-1])], order, key))


def normpool_forward(x: np.ndarray, geom: PoolGeometry = PoolGeometry(), order=SEQUENTIAL, key=()):
    win = windows(np.asarray(x), geom)
    return norm_windows(win, order, key)


def route_norm(g: np.ndarray, win: np.ndarray, y: np.ndarray, mode: PoolMode) -> np.ndarray:
    """Per-window backward of the Euclidean norm.

    Where the norm is nonzero the gradient is ``(x / ||x||) * g``.  Where it is
    exactly zero (including underflow of every square), ``normpool-zero`` picks
    the zero element of the unit ball and ``normpool-uniform`` the direction
    with every entry 1/sqrt(s).
    """
    if mode.kind not in ("normpool-zero", "normpool-uniform"):
        raise ValueError(f"pool mode {mode} is not a NormPool derived program")
    g = np.asarray(g)
    dt = g.dtype
    zero = y == 0
    safe = np.where(zero, np.ones((), dt), y)
    out = (win / safe[..., None]) * g[..., None]
    if mode.kind == "normpool-zero":
        fill = np.zeros((), dt)
    else:
        fill = dt.type(1.0 / math.sqrt(win.shape[-1]))
    at_zero = np.broadcast_to(fill, win.shape) * g[..., None]
    return np.where(zero[..., None], at_zero if mode.kind == "normpool-uniform" else fill, out)


def normpool_backward(grad_out, x, geom: PoolGeometry, mode: PoolMode, order=SEQUENTIAL, key=()):
    x = np.asarray(x)
    win = windows(x, geom)
    y = norm_windows(win, order, key)
    return unwindow(route_norm(grad_out, win, y, mode), geom, x.shape)

"""Small programs that compute the zero function in two ways.

``zero(t) = max_a(t * x) - max_b(t * x)`` is identically zero over the reals,
yet its AD derivative need not be.  Two constructions are provided:

* ``"max"``: ``max_a`` is a Python loop that keeps the first strict maximum
  (its gradient goes to the first maximal entry), ``max_b`` is the builtin
  max reduction differentiated with the policy's max rule (minimal by
  default, i.e. the gradient is split evenly over the ties).
* ``"relu-built"``: both maxima are built from ReLU through
  ``max(a, b) = (a + b)/2 + relu((a - b)/2) + relu((b - a)/2)`` applied as a
  two-level tree; ``max_a`` uses ReLU'(0) = 0 in both ReLUs, ``max_b`` uses
  ReLU'(0) = 1 in the first one.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import NonsmoothPolicy, Tape, Var, backprop
from .nonsmooth import PoolMode
from .precision import SEQUENTIAL, Precision, ReductionOrder

TABLE_T = (-1e-3, -1e-2, -1e-1, 0.0, 1e1, 1e2, 1e3)
VARIANTS = ("max", "relu-built")


def max_loop(z: Var) -> Var:
    """``res = z[0]; for i: if z[i] > res: res = z[i]``."""
    res = z[0]
    for i in range(1, z.shape[0]):
        zi = z[i]
        if zi.value > res.value:
            res = zi
    return res


def max_via_relu(a: Var, b: Var, s_pair=(0.0, 0.0)) -> Var:
    """max(a, b) through ReLU; ``s_pair`` pins ReLU'(0) of the two ReLU nodes."""
    s1, s2 = s_pair
    return (a + b) / 2 + ops.relu((a - b) / 2, s=s1) + ops.relu((b - a) / 2, s=s2)


def max4_via_relu(z: Var, s_pair) -> Var:
    lo = max_via_relu(z[0], z[1], s_pair)
    hi = max_via_relu(z[2], z[3], s_pair)
    pair = ops.stack(lo, hi)
    return max_via_relu(pair[0], pair[1], s_pair)


def zero_program(t: float, x, variant: str = "max", precision=Precision.B32):
    """Record ``zero(t)`` on a fresh tape; returns ``(tape, output)``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    tape = Tape(precision)
    tv = tape.param(np.asarray(t), "t")
    xv = tape.leaf(np.asarray(x, dtype=np.float64))
    z = tv * xv
    if variant == "max":
        out = max_loop(z) - ops.max_all(z)
    else:
        if z.shape[0] != 4:
            raise ValueError("the relu-built max is defined for 4-vectors")
        out = max4_via_relu(z, (0.0, 0.0)) - max4_via_relu(z, (1.0, 0.0))
    return tape, out


def zero_derivative(t: float, x, variant: str = "max", precision=Precision.B32,
                    pool_mode: PoolMode = PoolMode.minimal(),
                    order: ReductionOrder = SEQUENTIAL) -> float:
    tape, out = zero_program(t, x, variant, precision)
    g = backprop(tape, out, NonsmoothPolicy(pool_mode=pool_mode), order)
    return float(g["t"])


def zero_table(x, ts=TABLE_T, variant: str = "max", precision=Precision.B32, **kw) -> list[float]:
    return [zero_derivative(t, x, variant, precision, **kw) for t in ts]

"""Precision-parameterised reverse-mode AD with selectable nonsmooth derivative rules."""

from .autodiff import Gradient, NonsmoothPolicy, Tape, Var, backprop, grad_check
from .nonsmooth import PoolGeometry, PoolMode
from .precision import SEQUENTIAL, Precision, ReductionOrder

__version__ = "0.1.0"

__all__ = [
    "Gradient", "NonsmoothPolicy", "Tape", "Var", "backprop", "grad_check",
    "PoolGeometry", "PoolMode", "Precision", "ReductionOrder", "SEQUENTIAL", "__version__",
]

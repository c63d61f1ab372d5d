"""Floating-point formats and reduction orders.

Every tensor in the package is a plain numpy array whose dtype is one of
float16 / float32 / float64.  ``Precision`` maps between those dtypes and the
IEEE-754 binary16 / binary32 / binary64 formats, and ``ReductionOrder`` fixes
the order in which sums are accumulated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Precision(enum.Enum):
    B16 = 16
    B32 = 32
    B64 = 64

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({16: np.float16, 32: np.float32, 64: np.float64}[self.value])

    @property
    def eps(self) -> float:
        """Spacing of floats at 1.0 (2^-10, 2^-23, 2^-52)."""
        return float(np.finfo(self.dtype).eps)

    @property
    def bits(self) -> int:
        return self.value

    @classmethod
    def parse(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            value = value.strip().upper().lstrip("B")
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise ValueError(f"unknown precision {value!r}; expected 16, 32 or 64") from None

    @classmethod
    def of(cls, array) -> "Precision":
        dt = np.asarray(array).dtype
        for p in cls:
            if p.dtype == dt:
                return p
        raise TypeError(f"dtype {dt} is not one of float16/float32/float64")

    def __str__(self) -> str:
        return f"B{self.value}"


@dataclass(frozen=True)
class ReductionOrder:
    """Accumulation order for every sum in a computation.

    ``seed is None`` means sequential: ascending index order.  Otherwise each
    reduction is accumulated in a permutation drawn from ``seed`` and a key
    identifying the reduction, so the same seed always reproduces the same
    result bit for bit.

    With ``block`` set, a reduction of length n is cut into contiguous blocks
    of ``block`` terms; each block is summed in ascending order and only the
    block partial sums are combined in permuted order.  This is how split
    reductions with atomic accumulation behave on parallel hardware, and it
    leaves reductions of at most ``block`` terms deterministic.
    """

    seed: int | None = None
    block: int | None = None

    def __post_init__(self):
        if self.block is not None and int(self.block) < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")

    @classmethod
    def sequential(cls) -> "ReductionOrder":
        return cls(None)

    @classmethod
    def shuffled(cls, seed: int, block: int | None = None) -> "ReductionOrder":
        if seed is None or int(seed) < 0:
            raise ValueError("shuffled order needs a nonnegative integer seed")
        return cls(int(seed), None if block is None else int(block))

    @property
    def is_sequential(self) -> bool:
        return self.seed is None

    def derive(self, *key: int) -> "ReductionOrder":
        """Child order for a sub-computation; sequential stays sequential."""
        if self.seed is None:
            return self
        ss = np.random.SeedSequence([self.seed, *map(int, key)])
        return ReductionOrder(int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1)), self.block)

    def blocked(self, n: int) -> bool:
        """True when a reduction of n terms is split into permuted blocks."""
        return self.seed is not None and self.block is not None and n > self.block

    def permutation(self, n: int, *key: int) -> np.ndarray:
        """Term order for a reduction of n terms (identity for blocked orders)."""
        if self.seed is None or self.block is not None:
            return np.arange(n, dtype=np.int64)
        rng = np.random.default_rng([self.seed, *map(int, key)])
        return rng.permutation(n).astype(np.int64)

    def __str__(self) -> str:
        if self.seed is None:
            return "sequential"
        return f"shuffled({self.seed})" if self.block is None else f"blocked({self.seed},{self.block})"


SEQUENTIAL = ReductionOrder()

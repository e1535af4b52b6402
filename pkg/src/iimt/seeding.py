"""Deterministic RNG derivation.

All randomness in the package flows from integer seed tuples through
``numpy.random.SeedSequence`` so that every run of every command is a pure
function of its config seed.
"""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Generator deterministically derived from a tuple of ints."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tuple(int(k) for k in key))))


class SeedStream:
    """Hands out an unbounded deterministic sequence of integer seeds."""

    def __init__(self, *key: int):
        self._key = tuple(int(k) for k in key)
        self._n = 0

    def next(self) -> int:
        seq = np.random.SeedSequence(self._key + (self._n,))
        self._n += 1
        return int(seq.generate_state(1, dtype=np.uint64)[0])

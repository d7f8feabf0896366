"""Seed derivation shared by every stochastic routine.

A stream for ``(seed, index)`` is ``numpy.random.default_rng(splitmix64(seed, index))``.
Work is split into fixed-size blocks and every block owns one stream, so
results do not depend on how blocks are assigned to workers.
"""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(seed: int, index: int = 0) -> int:
    """One SplitMix64 output for state ``seed + (index + 1) * golden_gamma``."""
    x = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def stream(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(splitmix64(seed, index))

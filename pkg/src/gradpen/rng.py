"""Deterministic, platform-independent random streams.

Reproducibility across processes and platforms is a hard requirement for the
experiment reports, so the generator is fully specified here rather than
borrowed from numpy's Generator (whose streams are an implementation detail):

* ``raw(seed, n, offset)`` is counter-mode SplitMix64: output ``k`` is
  ``finalize(seed + (offset + k + 1) * GOLDEN) mod 2**64`` where ``finalize``
  is the standard SplitMix64 mixing function
  (xor-shift 30, * 0xBF58476D1CE4E5B9, xor-shift 27, * 0x94D049BB133111EB,
  xor-shift 31).
* ``uniform`` maps each 64-bit word to [0, 1) via ``(word >> 11) * 2**-53``.
* ``permutation(seed, n)`` sorts indices ``0..n-1`` by their ``raw`` keys
  (ascending, stable ties), i.e. argsort of the key stream.
* ``derive(seed, *tags)`` chains the finalizer to split independent streams
  (model init vs. data split vs. batch shuffling) off one trial seed.

Frozen test vectors live in tests/test_rng.py next to a pure-Python oracle.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _finalize(z: np.ndarray) -> np.ndarray:
    # All arithmetic on uint64 arrays wraps mod 2**64, which is exactly what
    # SplitMix64 wants.
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def raw(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """The n uint64 outputs at positions offset..offset+n-1 of the stream."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    state = np.uint64((seed + 0) & MASK64) + counters * np.uint64(GOLDEN)
    return _finalize(state)


def uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """n doubles in [0, 1), 53 bits of precision each."""
    return (raw(seed, n, offset) >> np.uint64(11)) * float(2.0**-53)


def derive(seed: int, *tags: int) -> int:
    """A child seed: finalize(seed ^ finalize(tag * GOLDEN)) chained per tag."""
    state = seed & MASK64
    for tag in tags:
        tagmix = int(_finalize(np.uint64((tag & MASK64) * GOLDEN & MASK64)))
        state = int(_finalize(np.uint64(state ^ tagmix)))
    return state


def permutation(seed: int, n: int) -> np.ndarray:
    """A permutation of 0..n-1: stable argsort of the raw key stream."""
    keys = raw(seed, n)
    return np.argsort(keys, kind="stable")

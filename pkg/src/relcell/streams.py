"""Deterministic RNG stream derivation.

Every random decision in the package flows from a single 64-bit seed
through keyed substreams, so results do not depend on scheduling or on
the order in which windows/batches are drawn.  Substream keys are mixed
with the SplitMix64 finalizer, which is well dispersed even for
consecutive integer inputs, then used to seed an independent PCG64
generator.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One SplitMix64 finalization round; maps u64 -> u64 bijectively."""
    x &= _MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK64
    return x ^ (x >> 31)


def mix(seed: int, *keys: int) -> int:
    """Fold integer keys into `seed`, one SplitMix64 round per key.

    mix(s) == splitmix64(s); argument order matters: mix(s, a, b) and
    mix(s, b, a) are unrelated streams.
    """
    h = splitmix64(seed & _MASK64)
    for k in keys:
        h = splitmix64((h + _GOLDEN + (k & _MASK64)) & _MASK64)
    return h


def substream(seed: int, *keys: int) -> np.random.Generator:
    """An independent PCG64 generator for the given (seed, keys) tuple."""
    return np.random.Generator(np.random.PCG64(mix(seed, *keys)))

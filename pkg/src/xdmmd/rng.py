"""Counter-based seeding.

Every random draw in the package comes from a stream addressed by
``(seed, index)``, so work split across threads (or reordered) reproduces
the serial result bit-for-bit.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def mix(seed: int, *keys: int) -> int:
    """Hash ``seed`` and ``keys`` into a fresh 64-bit seed."""
    words = [int(seed) & _MASK64, int(seed) >> 64 & _MASK64, *[int(k) & _MASK64 for k in keys]]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, index: int) -> np.random.Generator:
    """Philox generator for block ``index`` of ``seed``.

    The key is the seed and the counter's second word is the index, so
    streams for distinct indices never overlap for fewer than 2**64 draws.
    """
    key = int(seed) & ((1 << 128) - 1)
    counter = np.array([0, int(index) & _MASK64, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))

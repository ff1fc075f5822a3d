"""Deterministic RNG substreams.

Goals:
- one experiment seed, many independent streams
- streams are addressed by structured keys (epoch, prompt, slot, ...), never
  by draw order, so batch-level parallelism or reordering cannot change results
- the same (seed, key) always reproduces the same stream, which lets paired
  runs and lenience sweeps share their uniform draws

Implementation: the key components are folded through a splitmix64 chain into
a 128-bit Philox key. Philox is counter-based, so distinct keys give
independent streams and construction is cheap enough to make one stream per
(epoch, prompt, slot) item.

Non-goals: cryptographic quality, cross-library reproducibility.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stable_key", "substream"]

_MASK64 = (1 << 64) - 1


def stable_key(value: int | str) -> int:
    """Map a key component to a non-negative int.

    Strings are hashed with crc32; never use the builtin ``hash``, which is
    randomized per process.
    """
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    value = int(value)
    if value < 0:
        raise ValueError(f"negative key component: {value}")
    return value


def _mix(state: int, value: int) -> int:
    # splitmix64 step: absorb a word, then finalize
    state = (state + 0x9E3779B97F4A7C15 + value) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def substream(seed: int, *key: int | str) -> np.random.Generator:
    """Independent generator addressed by (seed, *key).

    Identical arguments yield bit-identical streams; distinct keys yield
    independent streams.
    """
    state = _mix(0, int(seed) & _MASK64)
    for component in key:
        state = _mix(state, stable_key(component))
    low = state
    high = _mix(state, len(key) + 1)
    return np.random.Generator(np.random.Philox(key=(high << 64) | low))

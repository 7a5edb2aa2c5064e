"""Counter-based keyed random numbers.

Every random draw in the package is a pure function of a key built from
integers (master seed, a stream tag, an environment or walk id, and a
site or step counter). Nothing is stored, so a walk that revisits a site
sees the same environment, and parallel replays are bit-identical.

The mixer is the SplitMix64 finalizer applied to 64-bit words, which has
full avalanche and is the standard choice for hashing counters.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "TAG_ENV",
    "TAG_WALK",
    "TAG_COMPANION",
    "TAG_CONFIG",
    "mix64",
    "key",
    "fold",
    "uniform",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

# stream tags keep environment, walk and auxiliary draws disjoint
TAG_ENV = 0x454E56
TAG_WALK = 0x57414C4B
TAG_COMPANION = 0x434F4D50
TAG_CONFIG = 0x434F4E46


def _as_u64(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == np.uint64:
        return a
    if a.dtype.kind in "iub":
        return a.astype(np.int64, copy=False).view(np.uint64)
    raise TypeError(f"integer input required, got {a.dtype}")


def mix64(z) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64 arrays."""
    z = np.array(_as_u64(z), dtype=np.uint64, copy=True, ndmin=1)
    with np.errstate(over="ignore"):
        z ^= z >> _S30
        z *= _M1
        z ^= z >> _S27
        z *= _M2
        z ^= z >> _S31
    return z


def fold(h, word) -> np.ndarray:
    """Absorb one more integer word into a running hash."""
    with np.errstate(over="ignore"):
        return mix64(_as_u64(h) ^ (_as_u64(word) * _GOLDEN + _GOLDEN))


def key(*words) -> np.ndarray:
    """Hash a sequence of integer words (scalars or broadcastable arrays)."""
    h = np.zeros(1, dtype=np.uint64)
    for w in words:
        h = fold(h, w)
    return h


def uniform(h) -> np.ndarray:
    """Map 64-bit hashes to doubles in [0, 1) using the top 53 bits."""
    return (_as_u64(h) >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)

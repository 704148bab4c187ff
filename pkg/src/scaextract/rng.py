"""Counter-based Gaussian noise.

Each sample is a pure function of ``(seed, counter, index)``: a SplitMix64
finalizer hashes the triple to two uniforms, Box-Muller turns them into a
standard normal.  Nothing is carried between calls, so any trace can be
regenerated from its coordinates alone.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, counter: np.ndarray, index: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        h = splitmix64(h ^ np.asarray(counter, np.uint64))
        return splitmix64(h ^ np.asarray(index, np.uint64))


def uniform(seed: int, counter, index) -> np.ndarray:
    """Uniform in (0, 1) from the top 53 bits of the hash."""
    bits = _key(seed, counter, index) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


def normal(seed: int, counters: np.ndarray, length: int) -> np.ndarray:
    """Standard normals of shape ``(len(counters), length)``."""
    counters = np.asarray(counters, np.uint64)[:, None]
    idx = np.arange(length, dtype=np.uint64)[None, :]
    u1 = uniform(seed, counters, 2 * idx)
    u2 = uniform(seed, counters, 2 * idx + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

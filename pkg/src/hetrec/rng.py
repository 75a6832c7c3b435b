"""Counter-based 64-bit hashing used wherever randomness must not depend on
evaluation order (walk steps, lazy embedding init)."""

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: int) -> int:
    """Scalar splitmix64 finalizer on Python ints."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_combine(*parts: int) -> int:
    h = 0
    for p in parts:
        h = splitmix64(h ^ (int(p) & MASK64))
    return h


def mix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 over a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    z = x.reshape(-1) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return (z ^ (z >> np.uint64(31))).reshape(x.shape)


def combine_array(h: np.ndarray | int, parts: np.ndarray | int) -> np.ndarray:
    """Vectorized ``splitmix64(h ^ part)``; either side may be a scalar."""
    if isinstance(h, (int, np.integer)):
        h = np.uint64(int(h) & MASK64)
    if isinstance(parts, (int, np.integer)):
        parts = np.uint64(int(parts) & MASK64)
    else:
        parts = np.asarray(parts).astype(np.uint64)
    return mix64(np.bitwise_xor(h, parts))

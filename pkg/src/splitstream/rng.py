"""Counter-based SplitMix64 generator.

Every random draw in the package (weight init, shuffles, partitions, noise,
synthetic data) comes from here so a run is fully determined by its seeds and
the stream is reproducible in any language with 64-bit integers.
"""
from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer (xorshift-multiply)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _tag64(tag: int | str) -> int:
    if isinstance(tag, int):
        return tag & _MASK
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


class Rng:
    """SplitMix64 stream: output i is mix64(seed + (i + 1) * golden)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def child(self, *tags: int | str) -> "Rng":
        s = self.seed
        for tag in tags:
            s = int(mix64(np.array([s ^ _tag64(tag)], dtype=np.uint64))[0])
            s = int(mix64(np.array([(s + 0x9E3779B97F4A7C15) & _MASK], dtype=np.uint64))[0])
        return Rng(s)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * _GOLDEN
        return mix64(state)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Float64 draws in [low, high) with 53 random bits each."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return mean + std * z

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def integers(self, n: int, high: int) -> np.ndarray:
        return (self.uniform(n) * high).astype(np.int64)

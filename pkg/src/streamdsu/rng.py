"""Integer-state PRNG used for corpus generation.

splitmix64 seeds a bank of xoshiro256** generators ("lanes"). Each call
steps every lane once and emits the lane outputs in lane order, so a
bank of L lanes produces the same stream regardless of how requests are
chunked. All state arithmetic is on uint64 arrays (wrap-around modulo
2**64), which keeps the stream identical on every platform.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

_U = np.uint64


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    state = (state + SPLITMIX_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, key: str) -> int:
    """Independent 64-bit seed for a named sub-stream (e.g. an utterance id)."""
    digest = int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    _, out = splitmix64((seed ^ digest) & MASK64)
    return out


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U(k)) | (x >> _U(64 - k))


class Xoshiro256:
    """Bank of xoshiro256** lanes seeded from splitmix64."""

    def __init__(self, seed: int, lanes: int = 256):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        state = seed & MASK64
        words = []
        for _ in range(4 * lanes):
            state, out = splitmix64(state)
            words.append(out)
        s = np.array(words, dtype=np.uint64).reshape(lanes, 4)
        self._s = [s[:, i].copy() for i in range(4)]
        self._buf = np.empty(0, dtype=np.uint64)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s1 * _U(5), 7) * _U(9)
        t = s1 << _U(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        chunks = [self._buf]
        have = self._buf.size
        lanes = self._s[0].size
        steps = max(0, math.ceil((n - have) / lanes))
        for _ in range(steps):
            chunks.append(self._step())
        pool = np.concatenate(chunks)
        self._buf = pool[n:]
        return pool[:n]

    def random(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 bits of mantissa."""
        return (self.next_u64(n) >> _U(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        return low + np.floor(self.random(n) * (high - low)).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws (Box-Muller, cosine branch only)."""
        u1 = 1.0 - self.random(n)
        u2 = self.random(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def geometric(self, p: float, n: int) -> np.ndarray:
        """Number of failures before the first success, support {0, 1, ...}."""
        if not 0.0 < p <= 1.0:
            raise ValueError("p must be in (0, 1]")
        if p == 1.0:
            return np.zeros(n, dtype=np.int64)
        u = 1.0 - self.random(n)
        return np.floor(np.log(u) / math.log1p(-p)).astype(np.int64)

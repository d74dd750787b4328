"""Counter-based 64-bit generator (SplitMix64 finaliser over seed + counter).

The i-th draw of a stream is ``mix(mix(seed) + i * GOLDEN)`` with wrapping
uint64 arithmetic, so a stream is fully determined by ``(seed, counter)``
and never touches the platform's default generator.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


@dataclass(frozen=True)
class RngState:
    seed: int
    counter: int = 0


class Rng:
    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= seed <= _MASK:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.counter = int(counter)
        self._key = np.uint64(mix64(self.seed))

    @classmethod
    def from_state(cls, state: RngState) -> "Rng":
        return cls(state.seed, state.counter)

    @property
    def state(self) -> RngState:
        return RngState(self.seed, self.counter)

    def fork(self, tag) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance this one."""
        digest = hashlib.blake2b(repr(tag).encode(), digest_size=8).digest()
        return Rng(mix64(self.seed ^ int.from_bytes(digest, "little")))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * GOLDEN)

    def uniform(self, size=()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(size)

    def normal(self, size=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        # Box-Muller, cosine branch only: two uniforms per normal
        n = int(np.prod(size))
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]
        u2 = u[n:]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(size)

    def integers(self, low: int, high: int, size=()) -> np.ndarray:
        """Integers in [low, high). Multiply-shift mapping of 53-bit uniforms."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        return (low + np.floor(self.uniform(size) * (high - low))).astype(np.int64)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, (1,))[0])

    def random(self) -> float:
        return float(self.uniform((1,))[0])

    def bernoulli(self, p, size=()) -> np.ndarray:
        return self.uniform(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

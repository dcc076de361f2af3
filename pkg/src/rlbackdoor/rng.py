"""Counter-based deterministic random number generation.

The arena stores its generator state inside the environment state so that a
snapshot/restore cycle reproduces the exact same random stream. A
counter-based generator (key + counter, splitmix64 finalizer) makes that
state two integers instead of an opaque platform-dependent blob.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(base: int, *tags: int | str) -> int:
    """Deterministically derive a sub-seed from a base seed and tags."""
    z = _mix((base & MASK64) ^ _GOLDEN)
    for tag in tags:
        if isinstance(tag, str):
            for byte in tag.encode("utf-8"):
                z = _mix(z ^ byte)
        else:
            z = _mix(z ^ (tag & MASK64))
    return z


@dataclass
class CounterRng:
    """Keyed counter generator; state is exactly two 64-bit words."""

    key: int
    counter: int = 0

    @classmethod
    def from_seed(cls, seed: int) -> CounterRng:
        return cls(key=_mix((seed & MASK64) ^ _GOLDEN), counter=0)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> CounterRng:
        key, counter = state
        return cls(key=key & MASK64, counter=counter & MASK64)

    def state(self) -> tuple[int, int]:
        return (self.key, self.counter)

    def next_u64(self) -> int:
        self.counter = (self.counter + 1) & MASK64
        return _mix((self.key + self.counter * _GOLDEN) & MASK64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u53 = self.next_u64() >> 11
        return lo + (hi - lo) * (u53 * (1.0 / (1 << 53)))

    def normal(self) -> float:
        # Box-Muller without caching: two draws per variate keeps the
        # counter advance independent of call history.
        u1 = self.uniform()
        u2 = self.uniform()
        if u1 <= 0.0:
            u1 = 2.0 ** -53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

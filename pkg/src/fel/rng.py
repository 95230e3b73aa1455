"""Portable deterministic random numbers.

Everything stochastic in the lab (scene draws, noise, weight init, batch
sampling) goes through a splitmix-style 64-bit generator so that a given
seed produces the same stream on every platform and in every run.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def split(seed: int, *path: int) -> int:
    """Derive an independent child seed from ``seed`` and an index path."""
    z = seed & _MASK64
    for p in path:
        z = _mix((z + _GAMMA) & _MASK64) ^ _mix((p * 0xD1342543DE82EF95 + 0x2545F4914F6CDD1D) & _MASK64)
    return z & _MASK64


class SplitMix64:
    """Sequential splitmix64 stream."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        # 53 high bits -> double in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_open(self) -> float:
        """Uniform in the open interval (0, 1)."""
        u = self.uniform()
        while u == 0.0:
            u = self.uniform()
        return u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, bias-free."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def choice(self, items):
        return items[self.randint(len(items))]

    def normal(self) -> float:
        # Box-Muller; both uniforms drawn even though one output is kept,
        # so the stream layout is fixed.
        u1 = self.uniform_open()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def normal_array(seed: int, shape, dtype=np.float64) -> np.ndarray:
    """Standard-normal array, a pure function of (seed, shape).

    Pairs of stream values map to pairs of outputs via Box-Muller, so the
    array content is independent of how the caller later reshapes it.
    """
    n = int(np.prod(shape)) if shape else 1
    stream = SplitMix64(seed)
    out = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        u1 = stream.uniform_open()
        u2 = stream.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2
    return out.reshape(shape).astype(dtype, copy=False)


def uniform_array(seed: int, shape, dtype=np.float64) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    stream = SplitMix64(seed)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = stream.uniform()
    return out.reshape(shape).astype(dtype, copy=False)

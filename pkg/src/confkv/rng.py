"""Deterministic counter-based random number generator.

The generator is SplitMix64: draw k (0-indexed) from seed s is

    x = (s + (k + 1) * 0x9E3779B97F4B7C15) mod 2**64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB mod 2**64
    x = x ^ (x >> 31)

Because each draw depends only on (seed, counter), sequential and
vectorized draws agree, and any implementation of these constants
reproduces the same streams bit-for-bit.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4B7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1

# (x >> 11) * 2**-53 maps a u64 to a double in [0, 1)
_INV_2_53 = float(2.0**-53)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def mix_u64(*parts: int) -> int:
    """Hash integers into one 64-bit seed (used to derive substreams)."""
    acc = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            acc = _mix((acc + np.uint64(p & _U64_MASK)) * np.uint64(1) + _GAMMA)
    return int(acc)


class SeededRng:
    """Counter-based SplitMix64 stream.

    Identical seed gives an identical draw sequence on every platform;
    the internal state is just (seed, number of draws so far).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        base = np.uint64(self.seed)
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(base + ks * _GAMMA)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1). Scalar when n is None."""
        m = 1 if n is None else int(n)
        u = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on uniform pairs."""
        m = int(n)
        pairs = (m + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = np.maximum(u[:pairs], _INV_2_53)  # avoid log(0)
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:m]

    def integers(self, high: int, n: int | None = None):
        """Integers uniform over [0, high) by rejection-free modular scaling."""
        if high <= 0:
            raise ValueError(f"high must be positive, got {high}")
        m = 1 if n is None else int(n)
        # multiply-shift keeps the bias below 2**-40 for high < 2**24
        vals = ((self._raw(m).astype(object) * high) >> 64)
        out = np.array([int(v) for v in vals], dtype=np.int64)
        return int(out[0]) if n is None else out

    def choice_without_replacement(self, population: int, k: int) -> np.ndarray:
        """k distinct indices from range(population), order irrelevant."""
        if k > population:
            raise ValueError(f"cannot draw {k} from {population}")
        # partial Fisher-Yates over an index array
        idx = np.arange(population, dtype=np.int64)
        for i in range(k):
            j = i + self.integers(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]

    def spawn(self, tag: int) -> "SeededRng":
        """Independent substream derived from this seed and a tag."""
        return SeededRng(mix_u64(self.seed, tag))

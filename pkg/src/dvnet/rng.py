"""Portable SplitMix64 generator.

Every random draw in the package goes through this generator rather than
``numpy.random`` so that datasets, initial weights and shuffles are
byte-identical across platforms and numpy versions.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def derive_seed(master, index):
    """Per-item seed ``master XOR index``, truncated to 64 bits."""
    return (int(master) ^ int(index)) & MASK64


class SplitMix64:
    """Counter-based SplitMix64 stream.

    The n-th output is ``mix(seed + n * GAMMA)``, so a block of outputs can
    be produced in one vectorized step.
    """

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self, n=1):
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, n=1, low=0.0, high=1.0):
        # 53 high bits -> double in [0, 1)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + (high - low) * u

    def normal(self, n=1):
        n = int(n)
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def rayleigh(self, n=1, sigma=1.0):
        return sigma * np.sqrt(-2.0 * np.log(1.0 - self.uniform(n)))

    def integers(self, low, high, n=1):
        """Integers in ``[low, high)``."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        return int(low) + np.floor(self.uniform(n) * span).astype(np.int64)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def scalar(self, low=0.0, high=1.0):
        return float(self.uniform(1, low, high)[0])

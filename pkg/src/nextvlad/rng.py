"""Counter-based random numbers (SplitMix64), fully pinned down.

Every stochastic choice in this package (weight init, dropout masks,
synthetic data, shuffling) is drawn from this generator so that a run is a
pure function of its 64-bit seed.  The algorithm, so another implementation
can reproduce the streams bit for bit:

    state_i  = (seed + (counter + i + 1) * 0x9E3779B97F4A7C15)  mod 2^64
    z = state_i
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9                    mod 2^64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB                    mod 2^64
    out_i = z ^ (z >> 31)

Draw i consumes counter position ``counter + i``; a draw of n words advances
the counter by n.  Derived quantities:

* uniform double in [0, 1):   (out >> 11) * 2**-53
* normal deviates:            Box-Muller on consecutive uniform pairs
                              u1 = ((out_a >> 11) + 1) * 2**-53   (0, 1]
                              u2 = (out_b >> 11) * 2**-53
                              r = sqrt(-2 ln u1); z0 = r cos(2 pi u2),
                              z1 = r sin(2 pi u2); n normals consume
                              ceil(n/2) pairs, z1 of the last pair is
                              dropped when n is odd
* integer in [0, bound):      floor(uniform * bound)
* permutation of n:           Fisher-Yates from the high index down, using
                              one integer draw in [0, i+1) per position i
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = 2.0 ** -53


def _mix(state: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # scalar uint64 wraparound is the point
        z = state
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a single 64-bit integer."""
    return int(_mix(np.uint64(x & _MASK)))


def derive_seed(base: int, *tags: int) -> int:
    """Fold integer tags into a base seed, one mix round per tag.

    Used to give independent, reproducible streams to subsystems
    (init / dropout / shuffle / ...) without shared state:
    ``seed_k = mix64(seed_{k-1} ^ mix64(tag_k))`` starting from ``base``.
    """
    s = base & _MASK
    for t in tags:
        s = mix64(s ^ mix64(t & _MASK))
    return s


class Rng:
    """Sequential view over the SplitMix64 counter stream for one seed."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK
        self.counter = counter & _MASK

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        out = _mix(np.uint64(self.seed) + idx * _GAMMA)
        self.counter = (self.counter + n) & _MASK
        return out

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = u.reshape(shape) if shape else u[0]
        return np.asarray(out, dtype=dtype) if shape else dtype(out)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        words = self.next_u64(2 * pairs)
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        out = z.reshape(shape) if shape else z[0]
        return np.asarray(out, dtype=dtype) if shape else dtype(out)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n independent integers in [0, bound)."""
        if bound < 1:
            raise ValueError(f"bound must be >= 1, got {bound}")
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return np.minimum((u * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from [0, n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        return self.permutation(n)[:k]

    def spawn(self, *tags: int) -> "Rng":
        """Independent stream keyed off this generator's seed and tags."""
        return Rng(derive_seed(self.seed, *tags))

"""Counter-based splittable random streams.

Every random quantity in the package is addressed by ``(key, counter)``:
a 64-bit stream key and a draw index.  A uniform is the SplitMix64 output
function applied to ``key + (counter + 1) * GOLDEN``, so any draw can be
recomputed in isolation, in any order, from Python or from a numba kernel,
and the two paths agree bit for bit.

Keys form a tree.  ``Stream.child(i)`` gives the substream for gene ``i``;
``Stream.derive("jc")`` gives a named substream.  Gene ``i``'s draws never
depend on how many genes are simulated or in which order.
"""

from __future__ import annotations

import hashlib
import math

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_CHILD_SALT = 0xD1B54A32D192ED03
_INV_2_53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (wrapping at 64 bits)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def child_key(key: int, index: int) -> int:
    return mix64(mix64(key ^ _CHILD_SALT) + (index + 1) * GOLDEN)


def uniform(key: int, counter: int) -> float:
    """Uniform on [0, 1) with 53 bits of resolution."""
    return (mix64(key + (counter + 1) * GOLDEN) >> 11) * _INV_2_53


def _path_code(item) -> int:
    if isinstance(item, (int, np.integer)) and not isinstance(item, bool):
        return int(item) & MASK64
    digest = hashlib.blake2b(repr(item).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_key(seed: int, *path) -> int:
    """Fold a seed and a path of ints/strings/floats into a stream key."""
    key = mix64(_path_code(seed) ^ GOLDEN)
    for item in path:
        key = child_key(key, _path_code(item))
    return key


class Stream:
    """A counter-addressed random stream identified by a 64-bit key."""

    __slots__ = ("key",)

    def __init__(self, key: int):
        self.key = int(key) & MASK64

    @classmethod
    def from_seed(cls, seed: int, *path) -> "Stream":
        return cls(derive_key(seed, *path))

    def child(self, index: int) -> "Stream":
        return Stream(child_key(self.key, int(index)))

    def derive(self, *path) -> "Stream":
        key = self.key
        for item in path:
            key = child_key(key, _path_code(item))
        return Stream(key)

    def uniform(self, counter: int) -> float:
        return uniform(self.key, counter)

    def exponential(self, counter: int, rate: float) -> float:
        # inverse CDF on the 53-bit uniform; u < 1 so the log is finite
        return -math.log1p(-self.uniform(counter)) / rate

    def numpy(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream (for shuffles etc.)."""
        return np.random.Generator(np.random.PCG64(self.key))

    def __repr__(self):
        return f"Stream(0x{self.key:016x})"

    def __eq__(self, other):
        return isinstance(other, Stream) and other.key == self.key

    def __hash__(self):
        return hash(self.key)


# numba mirrors of the functions above -------------------------------------

_U_GOLDEN = np.uint64(GOLDEN)
_U_SALT = np.uint64(_CHILD_SALT)


@nb.njit(inline="always", cache=True)
def nb_mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(inline="always", cache=True)
def nb_child_key(key, index):
    return nb_mix64(nb_mix64(key ^ _U_SALT) + (np.uint64(index) + np.uint64(1)) * _U_GOLDEN)


@nb.njit(inline="always", cache=True)
def nb_uniform(key, counter):
    z = nb_mix64(key + (np.uint64(counter) + np.uint64(1)) * _U_GOLDEN)
    return np.float64(z >> np.uint64(11)) * _INV_2_53


def as_uint64(key: int) -> np.uint64:
    return np.uint64(int(key) & MASK64)

"""Counter-based random streams keyed by (master seed, replicate, role).

Every replicate owns independent streams derived from the master seed by
hashing, so results never depend on scheduling or chunking.  The generator
is the splitmix64 finalizer used as a counter-based RNG: the j-th uniform of
a stream with key ``k`` is ``mix64(k + (j+1)*GAMMA) >> 11`` scaled to [0, 1).
The same arithmetic is implemented three times (pure Python here, vectorized
numpy and numba in the ensemble kernels) and the implementations are checked
bit-identical in the test suite.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_KEY_SALT = 0x8BADF00DDEADBEEF

# Stream roles: one urn stream and one embedding stream per replicate.
ROLE_URN = 0
ROLE_EMBED = 1

_INV_2_53 = 1.1102230246251565e-16  # 2**-53


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & MASK64
    return (x ^ (x >> 31)) & MASK64


def stream_key(seed: int, replicate: int, role: int = ROLE_URN) -> int:
    """Derive the 64-bit key of one replicate stream."""
    if seed < 0 or replicate < 0 or role < 0:
        raise ValueError("seed, replicate and role must be nonnegative")
    h = mix64((seed & MASK64) ^ _KEY_SALT)
    h = mix64(h ^ mix64(replicate & MASK64))
    return mix64(h ^ ((role * GAMMA) & MASK64))


def uniform(key: int, counter: int) -> float:
    """j-th uniform of the stream (counter starts at 0)."""
    x = mix64((key + ((counter + 1) * GAMMA)) & MASK64)
    return (x >> 11) * _INV_2_53


class CounterStream:
    """Sequential view of one keyed stream (pure-Python reference)."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key
        self.counter = counter

    @classmethod
    def for_replicate(cls, seed: int, replicate: int, role: int = ROLE_URN) -> "CounterStream":
        return cls(stream_key(seed, replicate, role))

    def next_uniform(self) -> float:
        u = uniform(self.key, self.counter)
        self.counter += 1
        return u


def uniform_block(key: np.uint64, counter0: int, n: int) -> np.ndarray:
    """Vectorized uniforms [counter0, counter0+n) of a single stream."""
    ctr = np.arange(counter0 + 1, counter0 + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = np.uint64(key) + ctr * np.uint64(GAMMA)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)) * _INV_2_53


def uniform_across(keys: np.ndarray, counter: int) -> np.ndarray:
    """One uniform per stream at a common counter (lockstep ensembles)."""
    with np.errstate(over="ignore"):
        x = keys + np.uint64((((counter + 1) * GAMMA) & MASK64))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)) * _INV_2_53


def replicate_keys(seed: int, replicates: range, role: int = ROLE_URN) -> np.ndarray:
    return np.array([stream_key(seed, r, role) for r in replicates], dtype=np.uint64)

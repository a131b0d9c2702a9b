"""Deterministic keyed random streams.

Every random draw in this package is a pure function of (seed, key, draw
index), where the key is a tuple such as ("value", step, position). Streams
never carry hidden state between calls, so two decoders that make the same
keyed requests produce bit-identical draws regardless of call order or of how
many other draws happened in between. That property is what makes the
zero-local degeneracy check exact.

The mixer is the splitmix64 finalizer applied per absorbed key element. All
arithmetic is modular uint64 on ndarrays (numpy scalars warn on wrap).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = ["RandomStream", "gumbel_noise"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0**-53)
_TINY = float(2.0**-53)


def _finalize(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise over a uint64 ndarray."""
    x = (x + _GOLDEN).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def _as_u64(value: int | str) -> np.uint64:
    if isinstance(value, str):
        digest = hashlib.blake2s(value.encode("utf-8"), digest_size=8).digest()
        return np.uint64(int.from_bytes(digest, "little"))
    # negative ints map onto the upper half of the u64 range
    return np.uint64(int(value) & 0xFFFFFFFFFFFFFFFF)


def _absorb(state: np.ndarray, values: np.ndarray) -> np.ndarray:
    return _finalize(state + values.astype(np.uint64))


def _to_uniform(bits: np.ndarray) -> np.ndarray:
    # 53 high bits -> [0, 1); exact on binary64
    return (bits >> np.uint64(11)).astype(np.float64) * _U53


@dataclass(frozen=True)
class RandomStream:
    """A keyed, counter-based random stream.

    `child(*parts)` derives an independent stream by absorbing the parts
    (ints or phase-tag strings) into the hash state. Draw methods with an
    `_at` suffix take an integer key array and return one value per key, so
    results do not depend on how callers batch or order the keys.
    """

    seed: int
    _state: int = -1

    def __post_init__(self) -> None:
        if self._state == -1:
            base = _absorb(np.array([_GOLDEN]), np.array([_as_u64(self.seed)]))
            object.__setattr__(self, "_state", int(base[0]))

    def child(self, *parts: int | str) -> "RandomStream":
        state = np.array([np.uint64(self._state)])
        for part in parts:
            state = _absorb(state, np.array([_as_u64(part)]))
        return RandomStream(self.seed, int(state[0]))

    # counter draws -------------------------------------------------------

    def _raw(self, counters: np.ndarray) -> np.ndarray:
        state = np.full(counters.shape, np.uint64(self._state), dtype=np.uint64)
        return _absorb(state, counters)

    def uniforms(self, n: int) -> np.ndarray:
        """n i.i.d. uniforms in [0, 1)."""
        return _to_uniform(self._raw(np.arange(n, dtype=np.uint64)))

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller, one pair of bits each."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        counters = np.arange(2 * n, dtype=np.uint64)
        u = _to_uniform(self._raw(counters)).reshape(n, 2)
        u1 = np.maximum(u[:, 0], _TINY)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])
        return z.reshape(shape)

    def gumbels(self, n: int) -> np.ndarray:
        """n i.i.d. standard Gumbel draws, g = -log(-log(u))."""
        u = np.clip(self.uniforms(n), _TINY, 1.0 - _U53)
        return -np.log(-np.log(u))

    # keyed draws ---------------------------------------------------------

    def _keyed_state(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys)
        state = np.full(keys.shape, np.uint64(self._state), dtype=np.uint64)
        return _absorb(state, keys.astype(np.int64).view(np.uint64))

    def uniforms_at(self, keys: np.ndarray) -> np.ndarray:
        """One uniform in [0, 1) per integer key, independent of batching."""
        return _to_uniform(_finalize(self._keyed_state(keys)))

    def gumbels_at(self, keys: np.ndarray) -> np.ndarray:
        u = np.clip(self.uniforms_at(keys), _TINY, 1.0 - _U53)
        return -np.log(-np.log(u))

    def normals_at(self, keys: np.ndarray, dim: int) -> np.ndarray:
        """(len(keys), dim) standard normals keyed per (key, dim index)."""
        keys = np.asarray(keys)
        state = self._keyed_state(keys)[:, None]
        counters = np.arange(2 * dim, dtype=np.uint64)[None, :]
        bits = _absorb(np.broadcast_to(state, (keys.shape[0], 2 * dim)), counters)
        u = _to_uniform(bits).reshape(keys.shape[0], dim, 2)
        u1 = np.maximum(u[..., 0], _TINY)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[..., 1])


def gumbel_noise(stream: RandomStream, count: int) -> np.ndarray:
    """Standard Gumbel noise vector; finite for every draw.

    The underlying uniforms are clamped away from 0 and 1 so -log(-log(u))
    can never produce an infinity.
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    return stream.gumbels(count)

"""Deterministic random streams.

Every random draw in the package flows through an `Rng`, which wraps numpy's
Philox bit generator. Philox is counter-based: the stream is a pure function
of (key, counter), so identical seeds and call sequences give bit-identical
values on every platform, independent of global RNG state.

Streams are addressed, not shared: `child(tag)` derives an independent stream
from (seed, tag-path) without consuming from the parent, so the draw order in
one component can never perturb another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    # splitmix64 finalizer; decorrelates sequential tags
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _tag_hash(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return _mix64(int(tag) & _MASK64)
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng tag must be int or str, got {type(tag).__name__}")


class Rng:
    """A seeded, splittable random stream."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag) -> "Rng":
        """Derive an independent stream; does not consume from this one."""
        return Rng(self.seed, _mix64(self.stream ^ _tag_hash(tag)))

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))
        if std != 1.0:
            out = out * np.dtype(dtype).type(std)
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0,
                dtype=np.float32) -> np.ndarray:
        u = self._gen.random(size=shape, dtype=np.dtype(dtype))
        return (u * (high - low) + low).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

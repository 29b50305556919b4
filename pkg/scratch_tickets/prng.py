"""Seeded, splittable random streams.

Every stream is a PCG64 generator seeded through numpy's SeedSequence, so a
(seed, split path) pair names one bit-identical stream on every platform.
Splitting never consumes draws from the parent.
"""
import zlib
from typing import Tuple, Union

import numpy as np

SplitKey = Union[int, str]

_MASK64 = (1 << 64) - 1


def _key_to_int(key: SplitKey) -> int:
    if isinstance(key, str):
        # crc32 is stable across interpreters, unlike hash()
        return zlib.crc32(key.encode("utf-8"))

    if key < 0:
        raise ValueError(f"Split keys must be non-negative: {key}")

    return int(key)


class Prng:
    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed}, path={self.path})"

    def split(self, *keys: SplitKey) -> "Prng":
        """Independent child stream addressed by `keys`."""
        return Prng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    # -------------------------------------------------------------------------

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._generator.uniform(low, high, size=shape)

    def normal(self, std: float, shape) -> np.ndarray:
        return self._generator.normal(0.0, std, size=shape)

    def signs(self, shape) -> np.ndarray:
        """Independent fair +1/-1 draws."""
        bits = self._generator.integers(0, 2, size=shape)
        return np.where(bits == 1, 1.0, -1.0)

    def permutation(self, count: int) -> np.ndarray:
        return self._generator.permutation(count)

    def choice(self, count: int, probs: np.ndarray) -> int:
        return int(self._generator.choice(count, p=probs))

    def integer(self, high: int = 1 << 31) -> int:
        return int(self._generator.integers(0, high))

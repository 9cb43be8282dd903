"""Named, seedable random streams on top of numpy's counter-based Philox generator."""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class RngStream:
    """Independent random stream identified by ``(seed, name)``.

    Streams with different names never share state, so e.g. drawing extra crop
    offsets does not shift the dropout masks.
    """

    def __init__(self, seed: int, name: str):
        self.seed = int(seed)
        self.name = name
        seq = np.random.SeedSequence([self.seed, _name_key(name)])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, suffix: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{suffix}")

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

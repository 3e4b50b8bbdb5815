"""Seedable random streams with a fixed normal transform.

Uniform bits come from numpy's PCG64, which produces the same stream on every
platform.  Normal deviates use the Marsaglia polar method on top of those
uniforms (rather than numpy's ziggurat) so that sampled traces are fully
specified by the seed.
"""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

Shape = Union[int, Sequence[int]]


class Stream:
    def __init__(self, seed: Union[int, np.random.SeedSequence]):
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @classmethod
    def family(cls, seed: int, names: Sequence[str]) -> dict[str, "Stream"]:
        """Independent named streams derived from one seed."""
        children = np.random.SeedSequence(seed).spawn(len(names))
        return {name: cls(child) for name, child in zip(names, children)}

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Shape = None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size: Shape = None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size: Shape, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = math.prod(shape)
        out = np.empty(n)
        filled = 0
        while filled < n:
            need = n - filled
            batch = int((need // 2 + 1) * 1.3) + 4
            uv = 2.0 * self._gen.random((batch, 2)) - 1.0
            s = uv[:, 0] ** 2 + uv[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            uv, s = uv[ok], s[ok]
            z = (uv * np.sqrt(-2.0 * np.log(s) / s)[:, None]).ravel()
            take = min(z.size, need)
            out[filled : filled + take] = z[:take]
            filled += take
        return (out * scale).reshape(shape)

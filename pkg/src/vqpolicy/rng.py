"""Deterministic random streams.

Every source of randomness in the package flows through a ``SeededRng``,
a thin wrapper over numpy's counter-based Philox generator.  A stream is
identified by a 64-bit seed plus a path of split labels, so independent
components (codebook init, batch order, rollout episodes, ...) can derive
their own streams that never interact and reproduce bit-for-bit across
platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


class SeededRng:
    """A named, splittable random stream with explicit counter state."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label: str) -> "SeededRng":
        """Derive an independent child stream named by `label`."""
        tag = zlib.crc32(label.encode("utf-8"))
        return SeededRng(self.seed, self._path + (tag,))

    @property
    def state(self):
        return self._gen.bit_generator.state

    # -- draws ------------------------------------------------------------

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size).astype(np.float32)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(np.float32)

    def trunc_normal(self, size, std: float = 0.02) -> np.ndarray:
        """Normal draws with anything past two standard deviations redrawn."""
        out = self._gen.standard_normal(size)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(np.float32)

    def integers(self, n: int, size=None):
        return self._gen.integers(0, n, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def categorical(self, probs) -> int:
        """Draw an index from a probability vector by inverse CDF.

        The vector must be finite, non-negative, and sum to 1 within 1e-6.
        """
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("categorical expects a non-empty 1-D probability vector")
        if not np.all(np.isfinite(p)):
            raise ValueError("categorical probabilities must be finite")
        if np.any(p < 0):
            raise ValueError("categorical probabilities must be non-negative")
        total = p.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"categorical probabilities sum to {total}, expected 1")
        u = self._gen.random()
        return int(np.searchsorted(np.cumsum(p / total), u, side="right").clip(0, p.size - 1))

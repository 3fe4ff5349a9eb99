"""Deterministic randomness built on the counter-based Philox generator.

A single 64-bit seed fans out into independent named substreams
(``rng.substream("init")``, ``rng.substream("step3/clip0")``, ...), so
data sampling, masking, jitter, and parameter init never share a stream
and inserting draws in one place cannot shift any other. Substream keys
are derived by hashing the path with 64-bit FNV-1a; identical seed and
path give identical draws on every platform numpy supports.
"""

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a(data, state=_FNV_OFFSET):
    for byte in data:
        state = ((state ^ byte) * _FNV_PRIME) & _MASK64
    return state


class Rng:
    """Seeded generator; draws advance an internal Philox counter."""

    def __init__(self, seed, _path=""):
        self.seed = int(seed) & _MASK64
        self.path = _path
        key = np.array([self.seed, _fnv1a(_path.encode("utf-8"))], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, name):
        """Fresh independent stream for ``name``, nested under this one."""
        prefix = f"{self.path}/" if self.path else ""
        return Rng(self.seed, _path=f"{prefix}{name}")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"

"""Vector helpers, the n-way partition layout, seeded streams and unit directions.

Everything here is a pure function of its inputs. Reductions whose results are
compared across peers (norms, dot products) go through ``math.fsum`` so the
value is the correctly rounded sum and does not depend on BLAS blocking.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


class LayoutError(ValueError):
    """Raised when parts do not match a partition layout."""


@dataclass(frozen=True)
class PartitionLayout:
    d: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise LayoutError(f"part count must be >= 1, got {self.n}")
        if self.d < self.n:
            raise LayoutError(f"dimension {self.d} is smaller than part count {self.n}")

    @cached_property
    def sizes(self) -> tuple:
        base, extra = divmod(self.d, self.n)
        return tuple(base + 1 if j < extra else base for j in range(self.n))

    @cached_property
    def offsets(self) -> tuple:
        out = [0]
        for s in self.sizes:
            out.append(out[-1] + s)
        return tuple(out)

    def bounds(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j + 1])

    def __len__(self):
        return self.n


def split(v: np.ndarray, n: int) -> list:
    """Split ``v`` into ``n`` contiguous views; the first ``d mod n`` parts are one longer."""
    v = np.asarray(v, dtype=np.float64)
    layout = PartitionLayout(v.shape[0], n)
    return [v[layout.bounds(j)] for j in range(n)]


def merge(parts: Sequence[np.ndarray], layout: PartitionLayout | None = None) -> np.ndarray:
    """Concatenate parts, checking that their sizes obey the layout rule."""
    if len(parts) == 0:
        raise LayoutError("cannot merge an empty list of parts")
    sizes = tuple(int(np.shape(p)[0]) for p in parts)
    if layout is None:
        layout = PartitionLayout(sum(sizes), len(parts))
    if sizes != layout.sizes:
        raise LayoutError(f"part sizes {sizes} do not match layout {layout.sizes}")
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def fdot(a: np.ndarray, b: np.ndarray) -> float:
    """Correctly rounded dot product (order independent, hence replayable)."""
    return math.fsum((np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)).tolist())


def fnorm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(math.fsum((a * a).tolist()))


def exact_mean(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Row-by-row accumulation then a single division.

    Used wherever two code paths must agree bit-for-bit (distributed vs
    centralized averaging): every element sees the same additions in the same
    order regardless of how the vectors were sliced.
    """
    if len(rows) == 0:
        raise ValueError("mean of zero rows")
    acc = np.array(rows[0], dtype=np.float64, copy=True)
    for r in rows[1:]:
        acc += r
    acc /= len(rows)
    return acc


def _seed_key(seed) -> tuple:
    if isinstance(seed, (bytes, bytearray)):
        raw = bytes(seed)
    elif isinstance(seed, (int, np.integer)):
        raw = int(seed).to_bytes(16, "little", signed=True)
    elif isinstance(seed, str):
        raw = seed.encode()
    else:
        raise TypeError(f"unsupported seed type {type(seed).__name__}")
    h = hashlib.sha256(b"btard-stream" + raw).digest()
    return (int.from_bytes(h[:8], "little"), int.from_bytes(h[8:16], "little"))


_U53 = float(2.0 ** -53)


class SeededStream:
    """Philox-4x64 counter stream keyed by a hash of the seed.

    Only raw 64-bit words are taken from numpy; the conversion to uniforms and
    normals (Box-Muller) is done here so the draw sequence is pinned by this
    file and by the Philox specification, not by numpy's sampler internals.
    """

    def __init__(self, seed):
        self.seed = seed
        self._bitgen = np.random.Philox(key=np.array(_seed_key(seed), dtype=np.uint64))
        self.counter = 0

    def raw(self, k: int) -> np.ndarray:
        self.counter += k
        return self._bitgen.random_raw(k).astype(np.uint64)

    def uniform(self, k: int) -> np.ndarray:
        """Uniforms on the open interval (0, 1)."""
        r = self.raw(k) >> np.uint64(11)
        return (r.astype(np.float64) + 0.5) * _U53

    def normal(self, k: int) -> np.ndarray:
        half = (k + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        out = np.empty(2 * half)
        out[0::2] = rad * np.cos(ang)
        out[1::2] = rad * np.sin(ang)
        return out[:k]

    def integer(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            w = int(self.raw(1)[0])
            if w < limit:
                return w % bound

    def sample_without_replacement(self, population: Sequence, k: int) -> list:
        pool = list(population)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.integer(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def bytes(self, k: int) -> bytes:
        words = self.raw((k + 7) // 8)
        return words.astype("<u8").tobytes()[:k]


def random_unit_direction(seed, layout: PartitionLayout) -> np.ndarray:
    """Gaussian vector whose every partition slice is scaled to unit norm."""
    z = SeededStream(seed).normal(layout.d)
    for j in range(layout.n):
        sl = layout.bounds(j)
        z[sl] /= np.sqrt(np.dot(z[sl], z[sl]))
    return z

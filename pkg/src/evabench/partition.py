"""Block-local sets E^n and contiguous groups P_c.

Keys are chunked into contiguous blocks of size K (the last one may be
shorter); query n shares block ``floor(n * M / (N * K))`` (just ``n // K``
for self-attention). Groups are C near-equal contiguous chunks, either of
the whole key range or of the keys outside the query's block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class PartitionSpec:
    N: int
    M: int
    K: int
    C: int
    over_full_range: bool = True
    _disjoint_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if min(self.N, self.M) < 1:
            raise ValueError("N and M must be positive")
        if self.K < 0 or self.C < 0:
            raise ValueError("K and C must be non-negative")
        if self.K == 0 and self.C == 0:
            raise ValueError("K = 0 and C = 0 leaves nothing to attend to")
        if self.K > self.M:
            raise ValueError(f"block size K={self.K} exceeds M={self.M}")
        if self.C > self.M:
            raise ValueError(f"C={self.C} groups cannot be formed from M={self.M} keys")

    @property
    def num_blocks(self) -> int:
        """Number of key blocks; a single empty block when K = 0."""
        return -(-self.M // self.K) if self.K else 1

    def block_of_query(self, n: int) -> int:
        if not self.K:
            return 0
        return min((n * self.M) // (self.N * self.K), self.num_blocks - 1)

    def block_keys(self, b: int) -> tuple[int, int]:
        if not self.K:
            return 0, 0
        return b * self.K, min((b + 1) * self.K, self.M)

    @cached_property
    def query_ranges(self) -> list[tuple[int, int]]:
        """Contiguous query range ``[start, stop)`` owned by each block."""
        if self.K:
            bounds = np.minimum((np.arange(self.N) * self.M) // (self.N * self.K), self.num_blocks - 1)
        else:
            bounds = np.zeros(self.N, dtype=int)
        out = []
        for b in range(self.num_blocks):
            idx = np.flatnonzero(bounds == b)
            out.append((int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0))
        return out

    def E(self, n: int) -> np.ndarray:
        lo, hi = self.block_keys(self.block_of_query(n))
        return np.arange(lo, hi)

    @property
    def E_sets(self) -> list[np.ndarray]:
        return [self.E(n) for n in range(self.N)]

    @cached_property
    def P_sets(self) -> list[np.ndarray]:
        """Near-equal contiguous chunks of ``[M]`` (sizes differ by at most one)."""
        if not self.C:
            return []
        return np.array_split(np.arange(self.M), self.C)

    def groups_for_block(self, b: int) -> list[np.ndarray]:
        if self.over_full_range or not self.K:
            return self.P_sets
        if b not in self._disjoint_cache:
            lo, hi = self.block_keys(b)
            rest = np.concatenate([np.arange(0, lo), np.arange(hi, self.M)])
            chunks = np.array_split(rest, self.C) if self.C else []
            self._disjoint_cache[b] = [c for c in chunks if c.size]
        return self._disjoint_cache[b]

    def groups_for(self, n: int) -> list[np.ndarray]:
        return self.groups_for_block(self.block_of_query(n))


def build_partition(N: int, M: int, K: int, C: int, over_full_range: bool = True) -> PartitionSpec:
    return PartitionSpec(N, M, K, C, over_full_range)

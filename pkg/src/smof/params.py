"""Filter Skeleton / Filter Mask state and the ring geometry of a K x K kernel.

Indices in the public helpers follow the usual convention for this method:
slices are 1-based from the border inward (slice 1 is the outermost ring),
edges are numbered 1..4 clockwise from the top. Cell coordinates are 0-based
(row, col).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import Tensor


def _check_kernel(K: int) -> None:
    if K < 1 or K % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {K}")


def _check_slice(K: int, i: int) -> None:
    _check_kernel(K)
    if not 1 <= i <= K // 2:
        raise ValueError(f"slice index {i} out of range 1..{K // 2} for K={K}")


def slice_coords(K: int, i: int) -> set[tuple[int, int]]:
    """Cells of the square ring at depth ``i`` (|ring| = 4(K+1-2i))."""
    _check_slice(K, i)
    d = i - 1
    return {(r, c) for r in range(K) for c in range(K) if min(r, c, K - 1 - r, K - 1 - c) == d}


@lru_cache(maxsize=None)
def _edges(K: int, i: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    lo, hi = i - 1, K - i
    top = tuple((lo, c) for c in range(lo, hi))
    right = tuple((r, hi) for r in range(lo, hi))
    bottom = tuple((hi, c) for c in range(hi, lo, -1))
    left = tuple((r, lo) for r in range(hi, lo, -1))
    return top, right, bottom, left


def edge_coords(K: int, i: int, j: int) -> list[tuple[int, int]]:
    """Cells of edge ``j`` on slice ``i``; each edge owns exactly one corner."""
    _check_slice(K, i)
    if not 1 <= j <= 4:
        raise ValueError(f"edge index {j} out of range 1..4")
    return list(_edges(K, i)[j - 1])


@lru_cache(maxsize=None)
def edge_flat_index(K: int, i: int, j: int) -> np.ndarray:
    """Row-major flat indices of ``edge_coords(K, i, j)``."""
    idx = np.array([r * K + c for r, c in edge_coords(K, i, j)], dtype=np.int64)
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def slice_mask(K: int, i: int) -> np.ndarray:
    m = np.zeros((K, K), dtype=bool)
    for r, c in slice_coords(K, i):
        m[r, c] = True
    m.setflags(write=False)
    return m


class FilterSkeleton:
    """K x K multiplicative weights over kernel positions, peeled outside-in.

    ``i_min`` is the 1-based index of the outermost slice that is still
    active; every slice below it is frozen at zero.
    """

    def __init__(self, kernel_size: int, dtype=np.float32):
        _check_kernel(kernel_size)
        self.kernel_size = kernel_size
        self.values = Tensor(np.ones((kernel_size, kernel_size)), requires_grad=True, dtype=dtype)
        self.frozen = np.zeros((kernel_size, kernel_size), dtype=bool)
        self.i_min = 1

    @property
    def num_slices(self) -> int:
        return self.kernel_size // 2

    @property
    def effective_kernel_size(self) -> int:
        return effective_kernel_size(self)

    def active_slices(self) -> range:
        return range(self.i_min, self.num_slices + 1)

    def freeze_slice(self) -> None:
        """Zero and freeze the current outermost active slice."""
        i = self.i_min
        if i > self.num_slices:
            raise ValueError("no prunable slice left; the center is never frozen")
        m = slice_mask(self.kernel_size, i)
        self.values.data[m] = 0
        self.frozen |= m
        self.i_min = i + 1

    def set_effective_kernel_size(self, k_eff: int) -> None:
        """Peel slices until the effective size is ``k_eff`` (fixtures and checkpoints)."""
        _check_kernel(k_eff)
        if k_eff > self.effective_kernel_size:
            raise ValueError("cannot grow a peeled skeleton")
        while self.effective_kernel_size > k_eff:
            self.freeze_slice()

    def check_invariants(self) -> None:
        K = self.kernel_size
        c = K // 2
        assert not self.frozen[c, c], "center element frozen"
        assert 1 <= self.i_min <= K // 2 + 1
        for i in range(1, K // 2 + 1):
            m = slice_mask(K, i)
            if i < self.i_min:
                assert self.frozen[m].all(), f"slice {i} should be frozen"
            else:
                assert not self.frozen[m].any(), f"slice {i} should be active"
        assert np.all(self.values.data[self.frozen] == 0), "frozen entry is nonzero"


def effective_kernel_size(fs: FilterSkeleton) -> int:
    return fs.kernel_size - 2 * (fs.i_min - 1)


class FilterMask:
    """Per-output-channel multiplicative weights with learnable and pruned flags."""

    def __init__(self, length: int, learnable: np.ndarray | None = None, dtype=np.float32):
        if length < 1:
            raise ValueError("mask length must be positive")
        self.length = length
        self.values = Tensor(np.ones(length), requires_grad=True, dtype=dtype)
        self.learnable = np.ones(length, dtype=bool) if learnable is None else np.asarray(learnable, dtype=bool).copy()
        if self.learnable.shape != (length,):
            raise ValueError("learnable flags must match mask length")
        self.pruned = np.zeros(length, dtype=bool)

    @classmethod
    def with_fraction(cls, length: int, r: float, rng: np.random.Generator, dtype=np.float32) -> "FilterMask":
        """Mask whose learnable subset is ``floor(r * length)`` indices drawn from ``rng``."""
        if not 0 <= r <= 1:
            raise ValueError(f"learnable fraction must lie in [0, 1], got {r}")
        n = int(np.floor(r * length))
        learnable = np.zeros(length, dtype=bool)
        learnable[rng.choice(length, size=n, replace=False)] = True
        return cls(length, learnable, dtype=dtype)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(~self.pruned)

    @property
    def active(self) -> np.ndarray:
        """Boolean flags of entries the optimizer may update."""
        return self.learnable & ~self.pruned

    def prune(self, idx) -> None:
        self.values.data[idx] = 0
        self.pruned[idx] = True

    def check_invariants(self) -> None:
        assert not np.any(self.pruned & ~self.learnable), "non-learnable entry pruned"
        assert np.all(self.values.data[self.pruned] == 0), "pruned entry is nonzero"
        assert np.all(self.values.data[~self.learnable] == 1), "fixed entry moved off 1"
        assert (~self.pruned).any(), "mask prunes every channel"


@dataclass
class SharedMaskGroup:
    mask_id: str
    member_layer_ids: list[str] = field(default_factory=list)

    @property
    def shared(self) -> bool:
        return len(self.member_layer_ids) > 1

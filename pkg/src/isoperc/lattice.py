"""Torus geometry, L-infinity balls, block partitions and lattice-animal weights.

Sites are identified by their flat row-major index in ``[0, n**d)``; the
last coordinate varies fastest. Regions are ``frozenset`` objects of flat
indices. Coordinates can be converted with :meth:`TorusShape.index` and
:meth:`TorusShape.coords`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Iterable, NamedTuple

import numba as nb
import numpy as np

DEFAULT_BLOCK_SIDE = 16
EXACT_MAX_TERMINALS = 8
EXACT_MAX_BLOCKS = 4096


@dataclass(frozen=True)
class TorusShape:
    """The discrete torus ``(Z/nZ)^d``.

    Parameters
    ----------
    d : int
        Dimension, at least 1.
    n : int
        Side length, at least 2.
    """

    d: int
    n: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")
        if self.n < 2:
            raise ValueError(f"side length must be at least 2, got {self.n}")
        if self.n ** self.d >= 2**63:
            raise ValueError("site count does not fit in a 64-bit index")

    @property
    def size(self) -> int:
        """Number of sites ``n**d``."""
        return self.n**self.d

    @property
    def degree(self) -> int:
        return 2 * self.d

    def index(self, coords: Iterable[int]) -> int:
        """Flat index of a coordinate tuple (coordinates reduced mod n)."""
        coords = tuple(coords)
        if len(coords) != self.d:
            raise ValueError(f"expected {self.d} coordinates, got {len(coords)}")
        idx = 0
        for c in coords:
            idx = idx * self.n + (int(c) % self.n)
        return idx

    def coords(self, index: int) -> tuple[int, ...]:
        """Coordinate tuple of a flat index."""
        out = []
        for _ in range(self.d):
            out.append(int(index) % self.n)
            index = int(index) // self.n
        return tuple(reversed(out))

    def coord_array(self) -> np.ndarray:
        """All coordinates as an ``(n**d, d)`` integer array in flat order."""
        grids = np.indices((self.n,) * self.d).reshape(self.d, -1).T
        return np.ascontiguousarray(grids, dtype=np.int64)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """``(n**d, 2d)`` table of neighbor indices.

        Column ``2a`` holds the ``+1`` neighbor along axis ``a`` and column
        ``2a + 1`` the ``-1`` neighbor. For ``n = 2`` both columns of an axis
        hold the same site, so sums over the table count it twice.
        """
        coords = self.coord_array()
        strides = self.n ** np.arange(self.d - 1, -1, -1)
        flat = coords @ strides
        table = np.empty((self.size, 2 * self.d), dtype=np.int64)
        for a in range(self.d):
            for k, step in enumerate((1, -1)):
                shifted = (coords[:, a] + step) % self.n
                table[:, 2 * a + k] = flat + (shifted - coords[:, a]) * strides[a]
        table.setflags(write=False)
        return table


class Neighbors(NamedTuple):
    """Distinct neighbors of a site and whether the multiset collapsed."""

    sites: frozenset
    degenerate: bool


def neighbors(shape: TorusShape, v: int) -> Neighbors:
    """Nearest neighbors of site ``v`` with wraparound.

    For ``n = 2`` the two lattice directions of an axis hit the same site;
    it is reported once and ``degenerate`` is set. Update rules still count
    it twice (see :attr:`TorusShape.neighbor_table`).
    """
    row = shape.neighbor_table[int(v)]
    distinct = frozenset(int(w) for w in row)
    return Neighbors(distinct, len(distinct) < len(row))


def torus_linf(shape: TorusShape, u: int, v: int) -> int:
    """L-infinity distance between two sites on the torus."""
    cu, cv = shape.coords(u), shape.coords(v)
    best = 0
    for a, b in zip(cu, cv):
        diff = abs(a - b) % shape.n
        best = max(best, min(diff, shape.n - diff))
    return best


def ball(shape: TorusShape, A: Iterable[int], r: float) -> frozenset:
    """Sites within L-infinity distance ``floor(r)`` of the region ``A``."""
    A = [int(a) for a in A]
    if not A:
        raise ValueError("ball of an empty region")
    if r < 0:
        raise ValueError("radius must be non-negative")
    k = int(np.floor(r))
    if 2 * k + 1 >= shape.n:
        offsets_1d = list(range(shape.n))
    else:
        offsets_1d = list(range(-k, k + 1))
    out = set()
    for a in A:
        ca = shape.coords(a)
        for off in product(offsets_1d, repeat=shape.d):
            out.add(shape.index(c + o for c, o in zip(ca, off)))
    return frozenset(out)


@dataclass(frozen=True)
class BlockGrid:
    """Partition of the torus into cubic blocks of a given side.

    Blocks themselves form a torus of side ``n // side``; block ids are flat
    indices on that block torus.
    """

    shape: TorusShape
    side: int = DEFAULT_BLOCK_SIDE

    def __post_init__(self):
        if self.side < 1 or self.shape.n % self.side != 0:
            raise ValueError(f"block side {self.side} must divide n={self.shape.n}")

    @property
    def per_axis(self) -> int:
        return self.shape.n // self.side

    @property
    def count(self) -> int:
        return self.per_axis**self.shape.d

    def block_coords(self, b: int) -> tuple[int, ...]:
        m = self.per_axis
        out = []
        for _ in range(self.shape.d):
            out.append(int(b) % m)
            b = int(b) // m
        return tuple(reversed(out))

    def block_index(self, coords: Iterable[int]) -> int:
        m = self.per_axis
        idx = 0
        for c in coords:
            idx = idx * m + (int(c) % m)
        return idx

    def sites_of(self, b: int) -> frozenset:
        base = [c * self.side for c in self.block_coords(b)]
        return frozenset(
            self.shape.index(bc + o for bc, o in zip(base, off))
            for off in product(range(self.side), repeat=self.shape.d)
        )

    def cover(self, sites: Iterable[int]) -> frozenset:
        """Set of blocks touched by ``sites``."""
        return frozenset(block_of(self, v) for v in sites)

    def block_neighbor_table(self) -> np.ndarray:
        """Nearest-neighbor table of the block torus (-1 marks no neighbor)."""
        return _block_table(self)

    def adjacent(self, a: int, b: int) -> bool:
        """True when blocks are equal or nearest neighbors on the block torus."""
        if a == b:
            return True
        if self.per_axis == 1:
            return True
        return b in self.block_neighbor_table()[a]


def largest_block_side(n: int, target: int) -> int:
    """Largest divisor of ``n`` not exceeding ``target`` (at least 1)."""
    target = max(1, min(int(target), n))
    for s in range(target, 0, -1):
        if n % s == 0:
            return s
    return 1


def block_of(grid: BlockGrid, v: int) -> int:
    """Flat id of the block containing site ``v``."""
    return grid.block_index(c // grid.side for c in grid.shape.coords(v))


class AnimalWeight(NamedTuple):
    weight: int
    exact: bool


@nb.njit(cache=True)
def _bfs_from_sources(init, table):
    """Unit-weight shortest paths with per-node initial costs.

    ``init`` holds a starting cost per node (a large value for none); the
    result is ``min_u init[u] + dist(u, v)``. Sorted sources are merged with
    the BFS queue so the scan stays linear after the sort.
    """
    nv = init.shape[0]
    big = np.iinfo(np.int32).max // 4
    dist = init.copy()
    order = np.argsort(init, kind="mergesort")
    queue = np.empty(nv, dtype=np.int64)
    done = np.zeros(nv, dtype=np.bool_)
    head = 0
    tail = 0
    pos = 0
    while True:
        while pos < nv and done[order[pos]]:
            pos += 1
        while head < tail and done[queue[head]]:
            head += 1
        use_queue = False
        if head < tail:
            if pos >= nv or dist[queue[head]] <= dist[order[pos]]:
                use_queue = True
        elif pos >= nv:
            break
        if use_queue:
            u = queue[head]
            head += 1
        else:
            u = order[pos]
            pos += 1
        if dist[u] >= big:
            break
        done[u] = True
        for j in range(table.shape[1]):
            w = table[u, j]
            if w < 0 or done[w]:
                continue
            if dist[u] + 1 < dist[w]:
                dist[w] = dist[u] + 1
                queue[tail] = w
                tail += 1
    return dist


@nb.njit(cache=True)
def _steiner_table(terminals, table):
    """Dreyfus-Wagner node-count table over all terminal subsets.

    Returns ``best`` where ``best[mask]`` is the fewest nodes of a connected
    set containing the terminals selected by ``mask`` (``best[0] = 0``).
    """
    k = terminals.shape[0]
    nv = table.shape[0]
    big = np.iinfo(np.int32).max // 4
    full = 1 << k
    dp = np.full((full, nv), big, dtype=np.int64)
    for i in range(k):
        init = np.full(nv, big, dtype=np.int64)
        init[terminals[i]] = 0
        dp[1 << i] = _bfs_from_sources(init, table)
    for mask in range(1, full):
        if (mask & (mask - 1)) == 0:
            continue
        low = mask & (-mask)
        row = dp[mask]
        sub = (mask - 1) & mask
        while sub > 0:
            if sub & low:
                other = mask ^ sub
                for v in range(nv):
                    c = dp[sub, v] + dp[other, v]
                    if c < row[v]:
                        row[v] = c
            sub = (sub - 1) & mask
        dp[mask] = _bfs_from_sources(row, table)
    best = np.zeros(full, dtype=np.int64)
    for mask in range(1, full):
        best[mask] = dp[mask].min() + 1
    return best


def _exact_available(grid: BlockGrid, S) -> bool:
    return len(S) <= EXACT_MAX_TERMINALS and grid.count <= EXACT_MAX_BLOCKS


def _block_table(grid: BlockGrid) -> np.ndarray:
    m = grid.per_axis
    d = grid.shape.d
    if m == 1:
        return -np.ones((1, 2 * d), dtype=np.int64)
    return np.ascontiguousarray(TorusShape(d, m).neighbor_table)


def _greedy_weight(grid: BlockGrid, S: list[int]) -> int:
    """Upper bound: attach terminals one by one along shortest torus paths."""
    m = grid.per_axis
    tree = {S[0]}
    remaining = list(S[1:])

    def steps(a, b):
        ca, cb = grid.block_coords(a), grid.block_coords(b)
        moves = []
        for ax, (x, y) in enumerate(zip(ca, cb)):
            fwd = (y - x) % m
            if fwd <= m - fwd:
                moves.append((ax, 1, fwd))
            else:
                moves.append((ax, -1, m - fwd))
        return moves

    def dist(a, b):
        return sum(c for _, _, c in steps(a, b))

    while remaining:
        best = None
        for t in remaining:
            for u in tree:
                dd = dist(u, t)
                if best is None or dd < best[0]:
                    best = (dd, u, t)
        _, u, t = best
        cur = list(grid.block_coords(u))
        for ax, sgn, cnt in steps(u, t):
            for _ in range(cnt):
                cur[ax] = (cur[ax] + sgn) % m
                tree.add(grid.block_index(cur))
        tree.add(t)
        remaining.remove(t)
    return len(tree)


def _normalize_blocks(grid: BlockGrid, S) -> list[int]:
    S = sorted({int(b) for b in S})
    if not S:
        raise ValueError("lattice animal weight of an empty block set")
    for b in S:
        if not 0 <= b < grid.count:
            raise ValueError(f"block id {b} out of range")
    return S


def min_animal_weight(grid: BlockGrid, S) -> AnimalWeight:
    """Fewest blocks in a nearest-neighbor connected block set containing ``S``.

    Exact (Dreyfus-Wagner on the block torus) when ``|S| <= 8`` and the block
    torus has at most 4096 blocks; otherwise a greedy shortest-path upper
    bound with ``exact=False``.
    """
    S = _normalize_blocks(grid, S)
    if len(S) == 1:
        return AnimalWeight(1, True)
    if _exact_available(grid, S):
        best = _steiner_table(np.asarray(S, dtype=np.int64), _block_table(grid))
        return AnimalWeight(int(best[-1]), True)
    return AnimalWeight(_greedy_weight(grid, S), False)


def min_animal_weight_2(grid: BlockGrid, S) -> AnimalWeight:
    """Minimum over covers ``S1 | S2 = S`` of ``W(S1) + W(S2)`` (``W(empty) = 0``)."""
    S = _normalize_blocks(grid, S)
    if len(S) == 1:
        return AnimalWeight(1, True)
    if _exact_available(grid, S):
        best = _steiner_table(np.asarray(S, dtype=np.int64), _block_table(grid))
        full = (1 << len(S)) - 1
        value = min(int(best[m] + best[full ^ m]) for m in range(full + 1))
        return AnimalWeight(value, True)
    return AnimalWeight(_greedy_weight(grid, S), False)

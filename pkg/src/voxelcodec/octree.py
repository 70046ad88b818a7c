"""Octree construction over the unit cube and lossless symbol (de)serialization.

An octree is stored flat: one sorted array of occupied cells per depth level and
one 8-bit occupancy symbol per non-leaf cell describing which of its eight
children are occupied. Child bit j encodes offsets (bx, by, bz) via
j = 4*bx + 2*by + bz, where b=1 selects the upper half of the parent cube along
that axis. Cells within a level are ordered lexicographically by (ix, iy, iz),
which fixes a canonical symbol stream for the entropy coder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import NormalizationParams, PointCloud

MAX_DEPTH = 16

# child bit j -> (bx, by, bz)
CHILD_OFFSETS = np.array([[(j >> 2) & 1, (j >> 1) & 1, j & 1] for j in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class CellIndex:
    depth: int
    ix: int
    iy: int
    iz: int

    def __post_init__(self):
        n = 1 << self.depth
        if not (0 <= self.ix < n and 0 <= self.iy < n and 0 <= self.iz < n):
            raise ValueError(f"cell ({self.ix},{self.iy},{self.iz}) out of range at depth {self.depth}")


def cell_keys(cells: np.ndarray, depth: int) -> np.ndarray:
    """Pack (ix, iy, iz) into a single int64 whose order is lexicographic."""
    c = np.asarray(cells, dtype=np.int64)
    return (c[:, 0] << (2 * depth)) | (c[:, 1] << depth) | c[:, 2]


def keys_to_cells(keys: np.ndarray, depth: int) -> np.ndarray:
    mask = (1 << depth) - 1
    return np.stack([keys >> (2 * depth), (keys >> depth) & mask, keys & mask], axis=1)


@dataclass
class Octree:
    max_depth: int
    levels: list     # levels[k]: (n_k, 3) int64, lexicographically sorted
    symbols: list    # symbols[k]: (n_k,) uint8 for k < max_depth

    def node_count(self, depth=None):
        if depth is None:
            return sum(len(lv) for lv in self.levels)
        return len(self.levels[depth])

    def symbol_count(self):
        return sum(len(s) for s in self.symbols)

    def level_symbols(self, k):
        """Symbols at depth k as (CellIndex, symbol) pairs in canonical order."""
        if not 0 <= k < self.max_depth:
            raise ValueError(f"no symbols at depth {k} (max_depth {self.max_depth})")
        cells = self.levels[k]
        return [(CellIndex(k, *map(int, cells[i])), int(self.symbols[k][i]))
                for i in range(len(cells))]

    def symbol_stream(self) -> np.ndarray:
        """All symbols, level by level, in canonical order."""
        if self.max_depth == 0 or not self.symbols:
            return np.empty(0, dtype=np.uint8)
        return np.concatenate(self.symbols)

    def truncate(self, trunc_depth: int) -> "Octree":
        if not 1 <= trunc_depth <= self.max_depth:
            raise ValueError(f"truncation depth {trunc_depth} out of range [1, {self.max_depth}]")
        if trunc_depth == self.max_depth:
            return self
        return Octree(trunc_depth, self.levels[: trunc_depth + 1], self.symbols[:trunc_depth])

    def leaf_centers(self) -> np.ndarray:
        """Unit-cube centers of the deepest-level cells."""
        d = self.max_depth
        return (self.levels[d].astype(np.float64) + 0.5) / (1 << d)

    def validate(self):
        """Check structural invariants; raises on violation. Intended for tests."""
        assert len(self.levels) == self.max_depth + 1
        assert len(self.symbols) == self.max_depth
        assert len(self.levels[0]) == 1 and np.all(self.levels[0] == 0)
        for k in range(self.max_depth + 1):
            keys = cell_keys(self.levels[k], k)
            assert np.all(np.diff(keys) > 0), f"level {k} not sorted/unique"
        for k in range(self.max_depth):
            assert len(self.symbols[k]) == len(self.levels[k])
            assert self.symbols[k].min() >= 1
            kids = _expand_children(self.levels[k], self.symbols[k], k)
            assert np.array_equal(kids, self.levels[k + 1]), f"level {k + 1} inconsistent"


def build(cloud: PointCloud, depth: int) -> Octree:
    """Build the octree of a normalized cloud down to `depth` levels.

    The leaf cell of point p is floor(p * 2^depth), clamped so coordinates of
    exactly 1.0 fall into the last cell. Duplicate leaf cells collapse.
    """
    if len(cloud) == 0:
        raise ValueError("cannot build an octree from an empty cloud")
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth {depth} out of range [1, {MAX_DEPTH}]")
    pts = cloud.points
    if pts.min() < 0.0 or pts.max() > 1.0:
        raise ValueError("points must be normalized to [0, 1]^3 before octree construction")
    n = 1 << depth
    idx = np.floor(pts * n).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)

    levels = [None] * (depth + 1)
    symbols = [None] * depth
    keys = np.unique(cell_keys(idx, depth))
    levels[depth] = keys_to_cells(keys, depth)
    for k in range(depth - 1, -1, -1):
        child = levels[k + 1]
        bits = (4 * (child[:, 0] & 1) + 2 * (child[:, 1] & 1) + (child[:, 2] & 1)).astype(np.uint8)
        pkeys = cell_keys(child >> 1, k)
        ukeys, inverse = np.unique(pkeys, return_inverse=True)
        sym = np.zeros(len(ukeys), dtype=np.uint8)
        np.bitwise_or.at(sym, inverse, np.uint8(1) << bits)
        levels[k] = keys_to_cells(ukeys, k)
        symbols[k] = sym
    return Octree(depth, levels, symbols)


def _expand_children(cells: np.ndarray, syms: np.ndarray, k: int) -> np.ndarray:
    """Occupied depth-(k+1) cells implied by depth-k symbols, sorted canonically."""
    sel = ((syms[:, None] >> np.arange(8, dtype=np.uint8)[None, :]) & 1).astype(bool)
    base = cells[:, None, :] * 2 + CHILD_OFFSETS[None, :, :]
    kids = base[sel]
    order = np.argsort(cell_keys(kids, k + 1))
    return kids[order]


def rebuild_from_symbols(stream, depth: int) -> Octree:
    """Inverse of the canonical symbol serialization: stream -> octree.

    The stream must contain, level by level, one symbol per occupied cell in
    lexicographic cell order, exactly as produced by Octree.symbol_stream().
    """
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth {depth} out of range [1, {MAX_DEPTH}]")
    stream = np.asarray(stream, dtype=np.int64)
    levels = [np.zeros((1, 3), dtype=np.int64)]
    symbols = []
    pos = 0
    for k in range(depth):
        n = len(levels[k])
        if pos + n > len(stream):
            raise ValueError(f"symbol stream exhausted at depth {k}: need {n}, have {len(stream) - pos}")
        chunk = stream[pos: pos + n]
        pos += n
        if chunk.min() < 1 or chunk.max() > 255:
            raise ValueError(f"invalid occupancy symbol at depth {k} (must be in [1, 255])")
        sym = chunk.astype(np.uint8)
        symbols.append(sym)
        levels.append(_expand_children(levels[k], sym, k))
    if pos != len(stream):
        raise ValueError(f"{len(stream) - pos} trailing symbols beyond depth {depth}")
    return Octree(depth, levels, symbols)


def reconstruct_centers(tree: Octree, params: NormalizationParams) -> PointCloud:
    """One point per deepest-level cell, at the denormalized cube center."""
    return PointCloud(params.invert(tree.leaf_centers()))

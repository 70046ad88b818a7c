"""Per-depth binary occupancy grids and the local voxel crops fed to the models.

Grids at depth k cover [0, 2^k)^3. Up to depth 9 a dense uint8 array is kept;
deeper grids fall back to a sorted-key set, since a crop only ever touches M^3
cells and membership tests vectorize well with searchsorted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .octree import CellIndex, Octree, cell_keys

DENSE_DEPTH_LIMIT = 9


class VoxelGrid:
    """Binary occupancy of one octree level."""

    def __init__(self, depth: int, cells: np.ndarray):
        self.depth = depth
        self.size = 1 << depth
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        if len(cells) and (cells.min() < 0 or cells.max() >= self.size):
            raise ValueError(f"cell index out of range for depth {depth}")
        self.keys = np.unique(cell_keys(cells, depth))
        self._dense = None
        if depth <= DENSE_DEPTH_LIMIT:
            dense = np.zeros((self.size,) * 3, dtype=np.uint8)
            dense[cells[:, 0], cells[:, 1], cells[:, 2]] = 1
            self._dense = dense

    @property
    def occupancy(self) -> np.ndarray:
        """Dense 2^k cubed array; only materialized at dense depths."""
        if self._dense is None:
            raise ValueError(f"grid at depth {self.depth} is sparse; no dense occupancy array")
        return self._dense

    def occupied_count(self) -> int:
        return len(self.keys)

    def contains(self, cells: np.ndarray) -> np.ndarray:
        """Vectorized membership: (n, 3) int -> (n,) uint8, out-of-range counts as empty."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        inside = ((cells >= 0) & (cells < self.size)).all(axis=1)
        keys = cell_keys(np.clip(cells, 0, self.size - 1), self.depth)
        pos = np.searchsorted(self.keys, keys)
        pos[pos >= len(self.keys)] = max(len(self.keys) - 1, 0)
        hit = (self.keys[pos] == keys) if len(self.keys) else np.zeros(len(cells), dtype=bool)
        return (hit & inside).astype(np.uint8)


@dataclass
class Crop:
    """An M^3 binary window of a grid; out-of-bounds entries are zero."""

    size: int
    values: np.ndarray      # (M, M, M) uint8
    center: CellIndex


def grid_from_level(source, k: int) -> VoxelGrid:
    """Materialize the occupancy grid of depth level k.

    `source` is either an Octree or a (n, 3) array of occupied cells.
    """
    if isinstance(source, Octree):
        if not 0 <= k <= source.max_depth:
            raise ValueError(f"level {k} not available (max_depth {source.max_depth})")
        cells = source.levels[k]
    else:
        cells = np.asarray(source, dtype=np.int64)
    return VoxelGrid(k, cells)


def _extract_windows(grid: VoxelGrid, starts: np.ndarray, m: int) -> np.ndarray:
    """Gather (n, m, m, m) windows whose lower corner per node is `starts` (may be negative)."""
    starts = np.asarray(starts, dtype=np.int64).reshape(-1, 3)
    n = len(starts)
    s = grid.size
    ar = np.arange(m, dtype=np.int64)
    ax = starts[:, 0, None] + ar
    ay = starts[:, 1, None] + ar
    az = starts[:, 2, None] + ar
    if grid._dense is not None:
        vx = (ax >= 0) & (ax < s)
        vy = (ay >= 0) & (ay < s)
        vz = (az >= 0) & (az < s)
        cx, cy, cz = np.clip(ax, 0, s - 1), np.clip(ay, 0, s - 1), np.clip(az, 0, s - 1)
        out = grid._dense[cx[:, :, None, None], cy[:, None, :, None], cz[:, None, None, :]]
        valid = vx[:, :, None, None] & vy[:, None, :, None] & vz[:, None, None, :]
        return (out & valid).astype(np.uint8)
    # sparse path, chunked to bound the key-cube working set
    out = np.empty((n, m, m, m), dtype=np.uint8)
    chunk = max(1, (1 << 21) // (m * m * m))
    d = grid.depth
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        bx, by, bz = ax[lo:hi], ay[lo:hi], az[lo:hi]
        valid = ((bx >= 0) & (bx < s))[:, :, None, None] \
            & ((by >= 0) & (by < s))[:, None, :, None] \
            & ((bz >= 0) & (bz < s))[:, None, None, :]
        kx = np.clip(bx, 0, s - 1) << (2 * d)
        ky = np.clip(by, 0, s - 1) << d
        kz = np.clip(bz, 0, s - 1)
        keys = kx[:, :, None, None] | ky[:, None, :, None] | kz[:, None, None, :]
        flat = keys.reshape(-1)
        pos = np.searchsorted(grid.keys, flat)
        pos[pos >= len(grid.keys)] = max(len(grid.keys) - 1, 0)
        hit = (grid.keys[pos] == flat) if len(grid.keys) else np.zeros(flat.shape, dtype=bool)
        out[lo:hi] = (hit.reshape(keys.shape) & valid).astype(np.uint8)
    return out


def local_crops(grid: VoxelGrid, cells: np.ndarray, m: int) -> np.ndarray:
    """Same-depth M^3 crops centered on each cell; M must be odd."""
    if m % 2 == 0 or m < 1:
        raise ValueError(f"crop size must be odd and >= 1, got {m}")
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    return _extract_windows(grid, cells - (m - 1) // 2, m)


def local_crop(grid: VoxelGrid, center: CellIndex, m: int) -> Crop:
    if center.depth != grid.depth:
        raise ValueError(f"center depth {center.depth} != grid depth {grid.depth}")
    vals = local_crops(grid, np.array([[center.ix, center.iy, center.iz]]), m)[0]
    return Crop(m, vals, center)


CHILD_CROP_SIZE = 10


def child_region_crops(grid: VoxelGrid, cells: np.ndarray, m: int = CHILD_CROP_SIZE) -> np.ndarray:
    """Depth-(k+1) crops around the children of depth-k cells.

    The window spans child indices [2c - (m-2)/2, 2c + (m+2)/2) per axis, i.e.
    for m=10 the refinement of the 5-cell same-depth neighborhood, keeping the
    node's own 2x2x2 child block in the crop center.
    """
    if m % 2 != 0:
        raise ValueError(f"child-region crop size must be even, got {m}")
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    return _extract_windows(grid, 2 * cells - (m - 2) // 2, m)


def child_region_crop(grid: VoxelGrid, center: CellIndex, m: int = CHILD_CROP_SIZE) -> Crop:
    if grid.depth != center.depth + 1:
        raise ValueError(f"grid depth {grid.depth} != center depth {center.depth} + 1")
    vals = child_region_crops(grid, np.array([[center.ix, center.iy, center.iz]]), m)[0]
    return Crop(m, vals, center)


def temporal_context(center: CellIndex, grid_cur: VoxelGrid, grid_prev, grid_next,
                     grid_prev_child, m: int = 9, m_child: int = CHILD_CROP_SIZE):
    """The four crops for one node of a sequence frame.

    Returns (same-depth current, same-depth previous, same-depth next,
    child-depth previous). Missing neighbour frames (None) give all-zero crops.
    """
    if grid_cur is None:
        raise ValueError("current-frame grid is required")
    cur = local_crop(grid_cur, center, m)
    zeros = np.zeros((m, m, m), dtype=np.uint8)
    zeros_child = np.zeros((m_child,) * 3, dtype=np.uint8)
    prev = local_crop(grid_prev, center, m) if grid_prev is not None else Crop(m, zeros, center)
    nxt = local_crop(grid_next, center, m) if grid_next is not None else Crop(m, zeros, center)
    child = (child_region_crop(grid_prev_child, center, m_child)
             if grid_prev_child is not None else Crop(m_child, zeros_child, center))
    return cur, prev, nxt, child


def pool_down(grid: VoxelGrid) -> np.ndarray:
    """2x max-pool of a dense grid: the depth-(k-1) occupancy it implies."""
    occ = grid.occupancy
    s = grid.size // 2
    return occ.reshape(s, 2, s, 2, s, 2).max(axis=(1, 3, 5))

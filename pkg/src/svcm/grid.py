"""Regular 3D grids, activity masks, and voxel neighborhoods.

Arrays over a grid are stored flat in x-fastest order (linear index
``ix + nx * (iy + ny * iz)``), so dense 3D views use shape ``(nz, ny, nx)``.
Distances are Euclidean in world units: integer index offsets scaled by the
per-axis spacing.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np
from scipy import ndimage

__all__ = [
    "Grid3",
    "Mask",
    "Ball",
    "NeighborTable",
    "ball_neighbors",
    "neighbor_table",
    "connected_components",
]

# Structuring-element rank passed to scipy.ndimage for each face/edge/corner
# connectivity convention.
_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclasses.dataclass(frozen=True)
class Grid3:
    """Axis-aligned voxel grid with per-axis spacing.

    Parameters
    ----------
    dims : tuple of int
        Number of voxels along (x, y, z).
    spacing : tuple of float
        Physical voxel size along (x, y, z); all entries positive.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims!r}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape3(self) -> tuple[int, int, int]:
        """Dense array shape ``(nz, ny, nx)`` matching x-fastest flat order."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def linear_index(self, ix, iy, iz):
        """Flat index of voxel ``(ix, iy, iz)``; accepts scalars or arrays."""
        nx, ny, _ = self.dims
        return np.asarray(ix) + nx * (np.asarray(iy) + ny * np.asarray(iz))

    def unravel(self, linear):
        """Inverse of :meth:`linear_index`."""
        nx, ny, _ = self.dims
        linear = np.asarray(linear)
        ix = linear % nx
        iy = (linear // nx) % ny
        iz = linear // (nx * ny)
        return ix, iy, iz

    def world(self, linear) -> np.ndarray:
        """World coordinates (voxel centers) of flat indices, shape (..., 3)."""
        ix, iy, iz = self.unravel(linear)
        s = self.spacing
        return np.stack(
            [np.asarray(ix) * s[0], np.asarray(iy) * s[1], np.asarray(iz) * s[2]],
            axis=-1,
        ).astype(float)


@dataclasses.dataclass(frozen=True)
class Mask:
    """Set of active voxels on a grid.

    ``active`` lists the flat indices of active voxels in ascending order;
    the position of a voxel in that list is its *dense rank*.  All field
    arrays elsewhere in the package are indexed by dense rank.
    """

    grid: Grid3
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=bool).reshape(-1)
        if flat.size != self.grid.n_voxels:
            raise ValueError(
                f"mask has {flat.size} entries for a grid of {self.grid.n_voxels} voxels"
            )
        if not flat.any():
            raise ValueError("mask has no active voxels")
        flat = flat.copy()
        flat.setflags(write=False)
        active = np.flatnonzero(flat).astype(np.int64)
        active.setflags(write=False)
        rank_of = np.full(flat.size, -1, dtype=np.int64)
        rank_of[active] = np.arange(active.size)
        rank_of.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "rank_of", rank_of)

    @classmethod
    def full(cls, grid: Grid3) -> "Mask":
        return cls(grid, np.ones(grid.n_voxels, dtype=bool))

    @classmethod
    def from_dense(cls, grid: Grid3, dense: np.ndarray) -> "Mask":
        dense = np.asarray(dense, dtype=bool)
        if dense.shape != grid.shape3:
            raise ValueError(f"dense mask shape {dense.shape} != grid shape {grid.shape3}")
        return cls(grid, dense.reshape(-1))

    @property
    def n_active(self) -> int:
        return int(self.active.size)

    def dense(self) -> np.ndarray:
        return self.flat.reshape(self.grid.shape3)

    def require_active(self, linear: int) -> int:
        """Dense rank of an active voxel; raises for inactive centers."""
        linear = int(linear)
        if linear < 0 or linear >= self.grid.n_voxels:
            raise ValueError(f"voxel {linear} outside grid of {self.grid.n_voxels} voxels")
        rank = int(self.rank_of[linear])
        if rank < 0:
            ix, iy, iz = self.grid.unravel(linear)
            raise ValueError(f"voxel {linear} at index ({ix}, {iy}, {iz}) is not active")
        return rank

    def scatter(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        """Spread a dense-rank array onto the full grid (flat, x-fastest)."""
        values = np.asarray(values)
        if values.shape[-1] != self.n_active:
            raise ValueError(f"expected {self.n_active} values, got {values.shape[-1]}")
        out = np.full(values.shape[:-1] + (self.grid.n_voxels,), fill, dtype=values.dtype)
        out[..., self.active] = values
        return out

    def gather(self, flat_full: np.ndarray) -> np.ndarray:
        """Restrict a full-grid flat array to active voxels (dense-rank order)."""
        flat_full = np.asarray(flat_full)
        if flat_full.shape[-1] != self.grid.n_voxels:
            raise ValueError(
                f"expected {self.grid.n_voxels} values, got {flat_full.shape[-1]}"
            )
        return flat_full[..., self.active]


def _axis_bound(h: float, s: float) -> int:
    """Largest integer b with b * s strictly below h."""
    if h <= 0:
        return 0
    return max(int(np.ceil(h / s - 1e-12)) - 1, 0)


@lru_cache(maxsize=128)
def _ball_offsets(spacing: tuple, h: float):
    """Integer offsets with Euclidean world norm strictly below ``h``.

    Sorted by (dz, dy, dx) so that applying them to any center yields
    neighbors in ascending flat order.
    """
    bx = _axis_bound(h, spacing[0])
    by = _axis_bound(h, spacing[1])
    bz = _axis_bound(h, spacing[2])
    dz, dy, dx = np.meshgrid(
        np.arange(-bz, bz + 1), np.arange(-by, by + 1), np.arange(-bx, bx + 1),
        indexing="ij",
    )
    dx = dx.reshape(-1)
    dy = dy.reshape(-1)
    dz = dz.reshape(-1)
    dist = np.sqrt((dx * spacing[0]) ** 2 + (dy * spacing[1]) ** 2 + (dz * spacing[2]) ** 2)
    keep = dist < h
    dx, dy, dz, dist = dx[keep], dy[keep], dz[keep], dist[keep]
    order = np.lexsort((dx, dy, dz))
    offsets = np.stack([dx[order], dy[order], dz[order]], axis=1).astype(np.int64)
    offsets.setflags(write=False)
    dist = dist[order]
    dist.setflags(write=False)
    return offsets, dist


@dataclasses.dataclass(frozen=True)
class Ball:
    """Active voxels strictly inside an open Euclidean ball."""

    center: int
    center_rank: int
    h: float
    ranks: np.ndarray
    linear: np.ndarray
    distances: np.ndarray

    @property
    def size(self) -> int:
        return int(self.ranks.size)


def ball_neighbors(mask: Mask, center: int, h: float) -> Ball:
    """Members of ``B(center, h)`` restricted to active voxels.

    The ball is open (``dist < h``), so the center itself is excluded when
    ``h == 0``.  Members are returned in ascending dense-rank order.

    Raises
    ------
    ValueError
        If the center voxel is outside the grid or not active.
    """
    rank = mask.require_active(center)
    grid = mask.grid
    offsets, dists = _ball_offsets(grid.spacing, float(h))
    cx, cy, cz = grid.unravel(center)
    nx, ny, nz = grid.dims
    px = offsets[:, 0] + cx
    py = offsets[:, 1] + cy
    pz = offsets[:, 2] + cz
    inb = (px >= 0) & (px < nx) & (py >= 0) & (py < ny) & (pz >= 0) & (pz < nz)
    linear = grid.linear_index(px[inb], py[inb], pz[inb])
    ranks = mask.rank_of[linear]
    act = ranks >= 0
    return Ball(
        center=int(center),
        center_rank=rank,
        h=float(h),
        ranks=ranks[act].astype(np.int64),
        linear=linear[act].astype(np.int64),
        distances=dists[inb][act].copy(),
    )


@dataclasses.dataclass(frozen=True)
class NeighborTable:
    """Ball membership for every active voxel, one column per stencil offset.

    ``idx[r, k]`` is the dense rank of the k-th offset neighbor of the voxel
    with dense rank ``r`` (0 where ``valid[r, k]`` is False); ``dist[k]`` is
    the world distance of offset k, constant across rows.  Valid entries of
    each row are in ascending rank order.
    """

    h: float
    idx: np.ndarray
    valid: np.ndarray
    dist: np.ndarray


def neighbor_table(mask: Mask, h: float) -> NeighborTable:
    """Vectorized ball membership for all active voxels at bandwidth ``h``."""
    grid = mask.grid
    offsets, dists = _ball_offsets(grid.spacing, float(h))
    n_act = mask.n_active
    k = offsets.shape[0]
    cx, cy, cz = grid.unravel(mask.active)
    nx, ny, nz = grid.dims
    idx = np.zeros((n_act, k), dtype=np.int64)
    valid = np.zeros((n_act, k), dtype=bool)
    for j in range(k):
        px = cx + offsets[j, 0]
        py = cy + offsets[j, 1]
        pz = cz + offsets[j, 2]
        inb = (px >= 0) & (px < nx) & (py >= 0) & (py < ny) & (pz >= 0) & (pz < nz)
        lin = grid.linear_index(np.where(inb, px, 0), np.where(inb, py, 0), np.where(inb, pz, 0))
        r = mask.rank_of[lin]
        ok = inb & (r >= 0)
        idx[:, j] = np.where(ok, r, 0)
        valid[:, j] = ok
    return NeighborTable(h=float(h), idx=idx, valid=valid, dist=dists.copy())


def connected_components(mask: Mask, selected=None, connectivity: int = 6):
    """Connected components of a voxel set under 6/18/26 connectivity.

    Parameters
    ----------
    mask : Mask
        Active-voxel universe.
    selected : array of bool, optional
        Dense-rank indicator of the subset to label; defaults to all active
        voxels.
    connectivity : {6, 18, 26}
        Face, face+edge, or face+edge+corner adjacency.

    Returns
    -------
    list of ndarray
        Flat (linear) voxel indices of each component in ascending order;
        components sorted by decreasing size, ties by smallest first index.
    """
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity!r}")
    if selected is None:
        selected = np.ones(mask.n_active, dtype=bool)
    selected = np.asarray(selected, dtype=bool).reshape(-1)
    if selected.size != mask.n_active:
        raise ValueError(f"expected {mask.n_active} indicator entries, got {selected.size}")
    dense = np.zeros(mask.grid.n_voxels, dtype=bool)
    dense[mask.active[selected]] = True
    dense = dense.reshape(mask.grid.shape3)
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labels, n_labels = ndimage.label(dense, structure=structure)
    flat_labels = labels.reshape(-1)
    comps = []
    for lab in range(1, n_labels + 1):
        comps.append(np.flatnonzero(flat_labels == lab).astype(np.int64))
    comps.sort(key=lambda c: (-c.size, int(c[0])))
    return comps

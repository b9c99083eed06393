"""File formats: the Vol1 volume container, delimited tables, and PGM slices.

Vol1 layout (all little-endian):

========  ======  =====================================
offset    type    meaning
========  ======  =====================================
0         4s      magic ``b"VOL1"``
4         u16     format version (currently 1)
6         u16     payload dtype: 0 = float32, 1 = uint8
8         3*u32   dims (nx, ny, nz)
20        3*f64   spacing (sx, sy, sz)
44        ...     payload, x-fastest voxel order
========  ======  =====================================

float32 payloads round-trip bit-identically; NaNs are rejected on both read
and write with the offending voxel index.
"""

from __future__ import annotations

import struct

import numpy as np

from .grid import Grid3, Mask
from .leastsq import SubjectStack

__all__ = [
    "VolumeFormatError",
    "write_volume",
    "read_volume",
    "write_mask",
    "read_mask",
    "load_subject_stack",
    "write_csv",
    "write_pgm",
]

MAGIC = b"VOL1"
VERSION = 1
_HEADER = struct.Struct("<4sHH3I3d")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {"f4": 0, "u1": 1}


class VolumeFormatError(ValueError):
    """Malformed or inconsistent Vol1 content."""


def write_volume(path, grid: Grid3, values: np.ndarray, dtype: str = "f4") -> None:
    """Write a full-grid flat array (x-fastest) as a Vol1 file."""
    if dtype not in _DTYPE_CODES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}; use 'f4' or 'u1'")
    values = np.asarray(values).reshape(-1)
    if values.size != grid.n_voxels:
        raise VolumeFormatError(
            f"{path}: got {values.size} values for a grid of {grid.n_voxels} voxels"
        )
    if dtype == "f4":
        bad = np.flatnonzero(~np.isfinite(np.asarray(values, dtype=np.float64)))
        if bad.size:
            raise VolumeFormatError(f"{path}: non-finite value at voxel {int(bad[0])}")
    payload = np.ascontiguousarray(values, dtype=_DTYPES[_DTYPE_CODES[dtype]])
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dtype],
                          *grid.dims, *grid.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path):
    """Read a Vol1 file; returns ``(Grid3, flat_values)``.

    Raises :class:`VolumeFormatError` on bad magic, unknown version or
    dtype, truncated payloads (reporting expected vs actual bytes), and
    non-finite float payloads (reporting the first offending voxel).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: only {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, dtype_code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}, not a Vol1 file")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {dtype_code}")
    grid = Grid3(dims=(nx, ny, nz), spacing=(sx, sy, sz))
    dtype = _DTYPES[dtype_code]
    expected = grid.n_voxels * dtype.itemsize
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise VolumeFormatError(
            f"{path}: payload has {actual} bytes, expected {expected} "
            f"for dims {grid.dims} at byte offset {_HEADER.size}"
        )
    values = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).copy()
    if dtype_code == 0:
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise VolumeFormatError(f"{path}: non-finite value at voxel {int(bad[0])}")
    return grid, values


def write_mask(path, mask: Mask) -> None:
    """Companion u8 volume: 1 on active voxels, 0 elsewhere."""
    write_volume(path, mask.grid, mask.flat.astype("u1"), dtype="u1")


def read_mask(path) -> Mask:
    grid, values = read_volume(path)
    return Mask(grid, values.astype(bool))


def load_subject_stack(paths, mask: Mask | None = None):
    """Assemble per-subject Vol1 images into a :class:`SubjectStack`.

    All volumes must agree on dims and spacing; mismatches are reported with
    both file names.  Without an explicit mask, every voxel is active.
    """
    paths = list(paths)
    if not paths:
        raise VolumeFormatError("no subject volumes given")
    grid0, first = read_volume(paths[0])
    rows = [first]
    for path in paths[1:]:
        grid, values = read_volume(path)
        if grid != grid0:
            raise VolumeFormatError(
                f"{path}: dims/spacing {grid.dims}/{grid.spacing} differ from "
                f"{paths[0]}: {grid0.dims}/{grid0.spacing}"
            )
        rows.append(values)
    if mask is None:
        mask = Mask.full(grid0)
    elif mask.grid != grid0:
        raise VolumeFormatError(
            f"mask grid {mask.grid.dims} does not match volumes {grid0.dims}"
        )
    y = np.stack([mask.gather(r.astype(np.float64)) for r in rows])
    return SubjectStack(grid=grid0, mask=mask, y=y), grid0, mask


def write_csv(path, header, rows, fmt: str = "%.17g") -> None:
    """Plain delimited output with 17 significant digits for floats."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for cell in row:
                if isinstance(cell, (float, np.floating)):
                    cells.append(fmt % cell)
                else:
                    cells.append(str(cell))
            fh.write(",".join(cells) + "\n")


def write_pgm(path, image: np.ndarray, vmax: float) -> None:
    """8-bit binary PGM of a 2D array, clipped to ``[0, vmax]``.

    The mapping ``round(255 * clip(v, 0, vmax) / vmax)`` is fixed so repeat
    runs produce identical bytes.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {image.shape}")
    if vmax <= 0:
        raise ValueError(f"vmax must be positive, got {vmax}")
    scaled = np.rint(255.0 * np.clip(image, 0.0, vmax) / vmax).astype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())

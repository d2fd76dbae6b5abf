"""Scalar 3D volumes: grid geometry, trilinear sampling, resampling, and
intensity preprocessing.

Conventions used throughout the package:

* voxel index (i, j, k) sits at physical position (i*sx, j*sy, k*sz),
  the origin is voxel (0, 0, 0), orientation matrices are ignored;
* arrays are indexed ``data[x, y, z]``; serialized layouts are x-fastest;
* sampling outside the grid clamps coordinates to the border (edge-clamp);
* the canonical scalar type is float32.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridGeometry:
    """Regular voxel grid: per-axis counts and physical spacing in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise GeometryError("dims and spacing must each have 3 entries")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if any(d < 2 for d in self.dims):
            raise GeometryError(f"all dims must be >= 2, got {self.dims}")
        if any(not s > 0 for s in self.spacing):
            raise GeometryError(f"all spacings must be > 0, got {self.spacing}")

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def as_volume_array(data, geometry: GridGeometry, dtype=np.float32) -> np.ndarray:
    """Coerce ``data`` to a (nx, ny, nz) array of ``dtype``.

    A flat array is interpreted x-fastest (index = x + nx*y + nx*ny*z).
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 1:
        if arr.size != geometry.voxel_count:
            raise GeometryError(
                f"flat payload has {arr.size} values, geometry needs {geometry.voxel_count}"
            )
        arr = arr.reshape(geometry.dims, order="F")
    if arr.shape != geometry.dims:
        raise GeometryError(f"data shape {arr.shape} does not match dims {geometry.dims}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Volume3:
    """Scalar image on a GridGeometry. Immutable; float32; all values finite."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = as_volume_array(self.data, self.geometry)
        bad = np.size(arr) - np.count_nonzero(np.isfinite(arr))
        if bad:
            raise DataError(f"volume contains {bad} non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    def flat_xfastest(self) -> np.ndarray:
        """Flat copy of the payload in x-fastest order, as serialized."""
        return np.asfortranarray(self.data).ravel(order="F")


# ---------------------------------------------------------------------------
# trilinear sampling core

def _cell_and_frac(coords: np.ndarray, n: int):
    """Clamp coordinates to [0, n-1] and split into cell index and fraction.

    The containing cell of an exact interior node is the one to its left,
    so the fraction is 1.0 there; this pins the subgradient convention for
    differentiation at cell boundaries.
    """
    c = np.clip(coords, 0.0, n - 1)
    i0 = np.clip(np.ceil(c).astype(np.int64) - 1, 0, n - 2)
    return i0, c - i0


def trilinear(data: np.ndarray, x, y, z) -> np.ndarray:
    """Trilinear interpolation of a (nx, ny, nz) array at continuous voxel
    coordinates, edge-clamped. Coordinate arrays must share one shape."""
    nx, ny, nz = data.shape
    ix, fx = _cell_and_frac(np.asarray(x, dtype=np.float64), nx)
    iy, fy = _cell_and_frac(np.asarray(y, dtype=np.float64), ny)
    iz, fz = _cell_and_frac(np.asarray(z, dtype=np.float64), nz)

    c00 = data[ix, iy, iz] * (1 - fx) + data[ix + 1, iy, iz] * fx
    c10 = data[ix, iy + 1, iz] * (1 - fx) + data[ix + 1, iy + 1, iz] * fx
    c01 = data[ix, iy, iz + 1] * (1 - fx) + data[ix + 1, iy, iz + 1] * fx
    c11 = data[ix, iy + 1, iz + 1] * (1 - fx) + data[ix + 1, iy + 1, iz + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample_trilinear(vol: Volume3, pos) -> np.ndarray | float:
    """Sample a volume at continuous voxel coordinates.

    ``pos`` is either a single (x, y, z) triple or an (..., 3) array.
    Out-of-bounds positions are clamped to the border. Returns a scalar for
    a single position, otherwise an array of the leading shape.
    """
    p = np.asarray(pos, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    vals = trilinear(vol.data, p[..., 0], p[..., 1], p[..., 2])
    return float(vals[0]) if single else vals


def identity_coords(dims: tuple[int, int, int]):
    """Meshgrid of voxel indices, one float64 (nx, ny, nz) array per axis."""
    nx, ny, nz = dims
    return np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )


def resample(vol: Volume3, target: GridGeometry) -> Volume3:
    """Resample onto a new grid geometry by trilinear interpolation.

    Each target voxel's physical position is converted to source continuous
    voxel coordinates; the physical origin is shared.
    """
    if target == vol.geometry:
        return Volume3(vol.geometry, vol.data)
    gx, gy, gz = identity_coords(target.dims)
    sx, sy, sz = vol.geometry.spacing
    tx, ty, tz = target.spacing
    vals = trilinear(vol.data, gx * (tx / sx), gy * (ty / sy), gz * (tz / sz))
    return Volume3(target, vals.astype(np.float32))


# ---------------------------------------------------------------------------
# intensity preprocessing

def preprocess_mri(vol: Volume3) -> Volume3:
    """Clip to the 0.01th and 99.9th intensity percentiles, then rescale the
    clipped range to [0, 1].

    Percentiles use linear interpolation between order statistics
    (rank r = q*(n-1)). A degenerate range yields an all-zero volume and a
    logged warning.
    """
    flat = vol.data.astype(np.float64, copy=False).ravel()
    lo = float(np.quantile(flat, 0.0001, method="linear"))
    hi = float(np.quantile(flat, 0.999, method="linear"))
    if not hi > lo:
        logger.warning("preprocess_mri: degenerate intensity range, output is all zeros")
        return Volume3(vol.geometry, np.zeros(vol.geometry.dims, dtype=np.float32))
    out = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume3(vol.geometry, out.astype(np.float32))


def preprocess_ct(vol: Volume3) -> Volume3:
    """Min-max rescale to [0, 1]. A constant volume yields all zeros and a
    logged warning."""
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if not hi > lo:
        logger.warning("preprocess_ct: constant volume, output is all zeros")
        return Volume3(vol.geometry, np.zeros(vol.geometry.dims, dtype=np.float32))
    out = (vol.data.astype(np.float64) - lo) / (hi - lo)
    return Volume3(vol.geometry, out.astype(np.float32))

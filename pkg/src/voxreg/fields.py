"""Displacement fields and control-grid plumbing.

A displacement field maps fixed-grid voxel coordinates into moving-image
space (pullback convention): the warped image is
``warped(x) = moving(x + u(x))``. Vector components are always expressed in
image voxel units, also when the field lives on a coarser control grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError
from .volume import GridGeometry, _freeze, identity_coords, trilinear

RESOLUTION_FULL = "full"
RESOLUTION_CONTROL = "control"


@dataclass(frozen=True)
class DisplacementField:
    """Per-cell 3-vector field on its own grid.

    ``resolution`` tags whether the grid is the image grid ("full",
    stride 1) or a control grid ("control", one cell every ``stride`` image
    voxels, vertex-aligned at voxel 0).
    """

    geometry: GridGeometry
    vectors: np.ndarray
    resolution: str = RESOLUTION_FULL
    stride: int = 1

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if arr.shape != (3, *self.geometry.dims):
            raise GeometryError(
                f"vectors shape {arr.shape} does not match (3, {self.geometry.dims})"
            )
        if not np.isfinite(arr).all():
            raise DataError("displacement field contains non-finite values")
        if self.resolution not in (RESOLUTION_FULL, RESOLUTION_CONTROL):
            raise GeometryError(f"unknown resolution tag {self.resolution!r}")
        if int(self.stride) < 1:
            raise GeometryError("stride must be >= 1")
        if self.resolution == RESOLUTION_FULL and self.stride != 1:
            raise GeometryError("full-resolution fields must have stride 1")
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "vectors", _freeze(arr))


def zero_field(geometry: GridGeometry) -> DisplacementField:
    return DisplacementField(
        geometry, np.zeros((3, *geometry.dims), dtype=np.float32)
    )


def control_grid_dims(image_dims: tuple[int, int, int], stride: int) -> tuple[int, int, int]:
    """Control-point counts for a vertex-aligned grid of the given stride.

    Point i sits at image coordinate i*stride; the last point is at or past
    the final voxel so dense interpolation never extrapolates.
    """
    if stride < 1:
        raise GeometryError("grid stride must be >= 1")
    return tuple(int(math.ceil((n - 1) / stride)) + 1 for n in image_dims)


def control_geometry(image_geometry: GridGeometry, stride: int) -> GridGeometry:
    dims = control_grid_dims(image_geometry.dims, stride)
    spacing = tuple(s * stride for s in image_geometry.spacing)
    return GridGeometry(dims, spacing)


def control_point_coords(image_dims, stride: int):
    """Per-axis image-voxel coordinates of the control points (float64)."""
    dims = control_grid_dims(image_dims, stride)
    return tuple(np.arange(m, dtype=np.float64) * stride for m in dims)


def upsample_field(field: DisplacementField, target: GridGeometry) -> DisplacementField:
    """Interpolate a field onto the image grid, component-wise trilinear.

    Vectors keep their image-voxel units; only the sampling grid changes.
    """
    if field.stride == 1 and field.geometry.dims == target.dims:
        return DisplacementField(target, field.vectors)
    gx, gy, gz = identity_coords(target.dims)
    s = float(field.stride)
    out = np.empty((3, *target.dims), dtype=np.float32)
    for c in range(3):
        out[c] = trilinear(field.vectors[c], gx / s, gy / s, gz / s)
    return DisplacementField(target, out)


def sample_field(field: DisplacementField, x, y, z) -> np.ndarray:
    """Sample all three components at continuous image-voxel coordinates.

    Returns an array of shape (3, *coords.shape).
    """
    s = float(field.stride)
    xs = np.asarray(x, dtype=np.float64) / s
    ys = np.asarray(y, dtype=np.float64) / s
    zs = np.asarray(z, dtype=np.float64) / s
    return np.stack([trilinear(field.vectors[c], xs, ys, zs) for c in range(3)])


def invert_field(field: DisplacementField, iterations: int = 12) -> DisplacementField:
    """Fixed-point approximation of the inverse displacement.

    Solves w(y) = -u(y + w(y)); accurate for smooth folding-free fields.
    """
    if field.resolution != RESOLUTION_FULL:
        raise GeometryError("inversion needs a full-resolution field; upsample first")
    gx, gy, gz = identity_coords(field.geometry.dims)
    w = np.zeros((3, *field.geometry.dims), dtype=np.float64)
    for _ in range(iterations):
        w = -sample_field(field, gx + w[0], gy + w[1], gz + w[2])
    return DisplacementField(
        field.geometry, w.astype(np.float32), field.resolution, field.stride
    )

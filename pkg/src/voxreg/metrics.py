"""Registration quality metrics: label overlap (Dice), deformation
regularity (standard deviation of the log Jacobian determinant), and the
percentage of folding voxels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError
from .fields import RESOLUTION_FULL, DisplacementField
from .volume import GridGeometry, _freeze, identity_coords

__all__ = [
    "LabelVolume",
    "MetricsReport",
    "dice",
    "warp_labels",
    "jacobian_stats",
    "evaluate",
    "report_as_dict",
    "write_report",
    "read_report",
]

_DET_FLOOR = 1e-6


@dataclass(frozen=True)
class LabelVolume:
    """Integer segmentation on a voxel grid; 0 is background."""

    geometry: GridGeometry
    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise DataError(f"labels must be integers, got dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr.astype(np.int32))
        if arr.ndim == 1:
            arr = arr.reshape(self.geometry.dims, order="F")
        if arr.shape != self.geometry.dims:
            raise DataError(
                f"label shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if arr.size and int(arr.min()) < 0:
            raise DataError("labels must be non-negative")
        object.__setattr__(self, "labels", _freeze(arr))

    @property
    def inventory(self) -> tuple[int, ...]:
        """Sorted distinct non-background labels present in the volume."""
        present = np.unique(self.labels)
        return tuple(int(v) for v in present if v != 0)


def dice(a: LabelVolume, b: LabelVolume) -> tuple[dict[int, float], float]:
    """Per-label Dice overlap and its mean.

    Evaluates every label present in either volume; a label missing from
    one of the two scores 0. Returns ({} , 0.0) when both volumes are pure
    background.
    """
    if a.geometry != b.geometry:
        raise GeometryError("label volumes must share geometry")
    labels = sorted(set(a.inventory) | set(b.inventory))
    per_label: dict[int, float] = {}
    for lab in labels:
        in_a = a.labels == lab
        in_b = b.labels == lab
        inter = int(np.count_nonzero(in_a & in_b))
        total = int(np.count_nonzero(in_a)) + int(np.count_nonzero(in_b))
        per_label[lab] = 2.0 * inter / total
    mean = sum(per_label.values()) / len(per_label) if per_label else 0.0
    return per_label, mean


def warp_labels(seg: LabelVolume, u: DisplacementField) -> LabelVolume:
    """Nearest-neighbor pullback: output(x) = seg[round(clamp(x + u(x)))]."""
    if u.resolution != RESOLUTION_FULL or u.geometry.dims != seg.geometry.dims:
        raise GeometryError("warp_labels needs a full-resolution field on the segmentation grid")
    gx, gy, gz = identity_coords(seg.geometry.dims)
    idx = []
    for axis, grid in enumerate((gx, gy, gz)):
        coord = grid + u.vectors[axis]
        n = seg.geometry.dims[axis]
        idx.append(np.rint(np.clip(coord, 0, n - 1)).astype(np.int64))
    return LabelVolume(seg.geometry, seg.labels[idx[0], idx[1], idx[2]])


def _central_gradient(comp: np.ndarray, axis: int) -> np.ndarray:
    """Central difference over the interior along one axis (voxel units)."""
    lead = [slice(1, -1)] * 3
    lead[axis] = slice(2, None)
    lag = [slice(1, -1)] * 3
    lag[axis] = slice(0, -2)
    return (comp[tuple(lead)] - comp[tuple(lag)]) / 2.0


def jacobian_determinant(u: DisplacementField) -> np.ndarray:
    """Determinant of the warp x -> x + u(x) at every interior voxel.

    The Jacobian is I plus the central-difference gradient of u in voxel
    units; a 1-voxel border is excluded, so the result has shape
    (nx-2, ny-2, nz-2).
    """
    if u.resolution != RESOLUTION_FULL:
        raise GeometryError("jacobian analytics need a full-resolution field")
    if any(n < 3 for n in u.geometry.dims):
        raise GeometryError(
            f"dims {u.geometry.dims} leave no interior for central differences"
        )
    comp = u.vectors.astype(np.float64)
    j = np.empty((3, 3, *(n - 2 for n in u.geometry.dims)))
    for a in range(3):
        for axis in range(3):
            j[a, axis] = _central_gradient(comp[a], axis)
        j[a, a] += 1.0

    return (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )


def jacobian_stats(u: DisplacementField) -> tuple[float, float]:
    """(sdlogj, folding_pct) of the warp x -> x + u(x).

    Folding is the percentage of interior voxels with determinant <= 0;
    sdlogj is the population standard deviation of log(det) with the
    determinant floored at 1e-6.
    """
    det = jacobian_determinant(u)
    folding_pct = 100.0 * float(np.count_nonzero(det <= 0)) / det.size
    sdlogj = float(np.std(np.log(np.maximum(det, _DET_FLOOR))))
    return sdlogj, folding_pct


@dataclass(frozen=True)
class MetricsReport:
    dice_per_label: dict[int, float]
    dice_mean: float
    sdlogj: float
    folding_pct: float
    evaluated_label_count: int


def evaluate(
    fixed_seg: LabelVolume, moving_seg: LabelVolume, u: DisplacementField
) -> MetricsReport:
    """Warp the moving segmentation by u and score it against the fixed one."""
    warped = warp_labels(moving_seg, u)
    per_label, mean = dice(warped, fixed_seg)
    sdlogj, folding_pct = jacobian_stats(u)
    return MetricsReport(
        dice_per_label=per_label,
        dice_mean=mean,
        sdlogj=sdlogj,
        folding_pct=folding_pct,
        evaluated_label_count=len(per_label),
    )


def report_as_dict(report: MetricsReport) -> dict:
    return {
        "dice_per_label": {str(k): v for k, v in sorted(report.dice_per_label.items())},
        "dice_mean": report.dice_mean,
        "sdlogj": report.sdlogj,
        "folding_pct": report.folding_pct,
        "evaluated_label_count": report.evaluated_label_count,
    }


def write_report(report: MetricsReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report_as_dict(report), f, indent=2, allow_nan=False)
        f.write("\n")


def read_report(path) -> MetricsReport:
    with open(path) as f:
        doc = json.load(f)
    return MetricsReport(
        dice_per_label={int(k): float(v) for k, v in doc["dice_per_label"].items()},
        dice_mean=float(doc["dice_mean"]),
        sdlogj=float(doc["sdlogj"]),
        folding_pct=float(doc["folding_pct"]),
        evaluated_label_count=int(doc["evaluated_label_count"]),
    )

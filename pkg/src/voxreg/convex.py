"""Discrete displacement search over a control grid.

Builds a cost volume (feature SSD for every candidate displacement at every
control point) and runs alternating argmin / smoothing iterations with an
increasing quadratic coupling weight, producing a coarse displacement field
that is robust to local minima.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, DataError, GeometryError
from .features import FeatureVolume
from .fields import (
    RESOLUTION_CONTROL,
    DisplacementField,
    control_geometry,
    control_grid_dims,
    control_point_coords,
)
from .volume import GridGeometry, _freeze

logger = logging.getLogger(__name__)

__all__ = [
    "ConvexConfig",
    "CostVolume",
    "candidate_table",
    "build_cost_volume",
    "coupled_convex",
]


@dataclass(frozen=True)
class ConvexConfig:
    """Search-stage parameters.

    Candidates cover -search_radius..+search_radius per axis in steps of
    search_step; the step must divide twice the radius so the range is
    symmetric and closed. theta_schedule holds one coupling weight per
    iteration, strictly increasing.
    """

    grid_stride: int = 2
    search_radius: int = 8
    search_step: int = 1
    theta_schedule: tuple[float, ...] = (1.0, 3.0, 10.0)
    smooth_radius: int = 1
    patch_radius: int = 1
    feature_l2_norm: bool = False

    def validate(self):
        if self.grid_stride < 1:
            raise ConfigError("convex grid_stride must be >= 1")
        if self.search_radius < 1 or self.search_step < 1:
            raise ConfigError("convex search_radius and search_step must be >= 1")
        if (2 * self.search_radius) % self.search_step != 0:
            raise ConfigError(
                f"search_step {self.search_step} must divide "
                f"2*search_radius = {2 * self.search_radius}"
            )
        th = self.theta_schedule
        if len(th) < 1:
            raise ConfigError("theta_schedule needs at least one weight")
        if any(t <= 0 for t in th):
            raise ConfigError("theta_schedule weights must be positive")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("theta_schedule must be strictly increasing")
        if self.smooth_radius < 0 or self.patch_radius < 0:
            raise ConfigError("smooth_radius and patch_radius must be >= 0")


def candidate_table(cfg: ConvexConfig) -> np.ndarray:
    """(K, 3) displacement candidates, ordered by squared norm then x, y, z.

    The zero displacement sits at index 0, so argmin tie-breaking (smallest
    index) prefers identity, then the smallest candidates.
    """
    r, q = cfg.search_radius, cfg.search_step
    axis = np.arange(-r, r + 1, q, dtype=np.float64)
    table = np.array(list(itertools.product(axis, axis, axis)))
    order = np.lexsort(
        (table[:, 2], table[:, 1], table[:, 0], (table ** 2).sum(axis=1))
    )
    return table[order]


@dataclass(frozen=True)
class CostVolume:
    """Matching costs for every (control point, candidate) pair.

    ``costs[k, i, j, l]`` is the normalized cost of moving control point
    (i, j, l) by ``candidates[k]``. The control grid is vertex-aligned on
    the image grid with the recorded stride.
    """

    image_geometry: GridGeometry
    stride: int
    candidates: np.ndarray  # (K, 3) float64
    costs: np.ndarray  # (K, mx, my, mz) float32

    def __post_init__(self):
        cand = np.ascontiguousarray(np.asarray(self.candidates, dtype=np.float64))
        costs = np.ascontiguousarray(np.asarray(self.costs, dtype=np.float32))
        if cand.ndim != 2 or cand.shape[1] != 3:
            raise GeometryError(f"candidate table shape {cand.shape} is not (K, 3)")
        expected = control_grid_dims(self.image_geometry.dims, self.stride)
        if costs.shape != (cand.shape[0], *expected):
            raise GeometryError(
                f"costs shape {costs.shape} does not match "
                f"({cand.shape[0]}, {expected})"
            )
        if not np.isfinite(costs).all():
            raise DataError("cost volume contains non-finite values")
        if costs.size and float(costs.min()) < 0:
            raise DataError("cost volume contains negative costs")
        object.__setattr__(self, "candidates", _freeze(cand))
        object.__setattr__(self, "costs", _freeze(costs))

    @property
    def candidate_count(self) -> int:
        return self.candidates.shape[0]

    @property
    def control_dims(self) -> tuple[int, int, int]:
        return self.costs.shape[1:]


def _l2_normalize(data: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.einsum("cxyz,cxyz->xyz", data, data))
    return np.divide(data, norm[None], out=np.zeros_like(data), where=norm[None] > 0)


def _shifted_view(padded: np.ndarray, delta, pad: int, dims) -> np.ndarray:
    sl = tuple(
        slice(pad + int(d), pad + int(d) + n) for d, n in zip(delta, dims)
    )
    return padded[(slice(None), *sl)]


def build_cost_volume(
    fixed: FeatureVolume,
    moving: FeatureVolume,
    cfg: ConvexConfig,
    jobs: int = 1,
) -> CostVolume:
    """Evaluate feature SSD for every candidate at every control point.

    The per-voxel squared channel difference between the fixed features and
    the candidate-shifted moving features (edge-clamped lookup) is averaged
    over channels and over a (2*patch_radius+1)³ box around each control
    point; patch positions past the grid clamp to the border. Costs are
    then divided per control point by their mean over candidates, so a
    point's cost vector has mean 1 wherever it is not identically zero.

    Candidate evaluation is independent per candidate; ``jobs > 1`` splits
    the candidate list over a thread pool.
    """
    cfg.validate()
    if fixed.geometry != moving.geometry:
        raise GeometryError(
            f"feature geometries differ: {fixed.geometry} vs {moving.geometry}"
        )
    if fixed.channels != moving.channels:
        raise GeometryError(
            f"channel mismatch: {fixed.channels} vs {moving.channels}"
        )
    if fixed.stride != 1 or moving.stride != 1:
        raise GeometryError("cost volume needs stride-1 (voxel-resolution) features")

    dims = fixed.geometry.dims
    g = cfg.grid_stride
    cand = candidate_table(cfg)
    k_count = cand.shape[0]
    mdims = control_grid_dims(dims, g)
    coords = control_point_coords(dims, g)

    fdat = fixed.data.astype(np.float32)
    mdat = moving.data.astype(np.float32)
    if cfg.feature_l2_norm:
        fdat = _l2_normalize(fdat)
        mdat = _l2_normalize(mdat)

    pad = cfg.search_radius
    mpad = np.pad(mdat, ((0, 0),) + ((pad, pad),) * 3, mode="edge")

    # vertex-aligned control points can overhang the last voxel when the
    # stride does not divide n-1; padding the difference map by the
    # overhang keeps the patch average consistent with clamped sampling
    over = tuple(int(c[-1]) - (n - 1) for c, n in zip(coords, dims))
    size = 2 * cfg.patch_radius + 1
    ix = np.ix_(*(c.astype(np.int64) for c in coords))

    costs = np.empty((k_count, *mdims), dtype=np.float32)

    def eval_candidates(lo: int, hi: int):
        for k in range(lo, hi):
            diff = fdat - _shifted_view(mpad, cand[k], pad, dims)
            dmap = np.einsum("cxyz,cxyz->xyz", diff, diff)
            if any(over):
                dmap = np.pad(dmap, tuple((0, o) for o in over), mode="edge")
            boxed = uniform_filter(dmap, size=size, mode="nearest")
            costs[k] = boxed[ix] / fixed.channels

    if jobs > 1:
        step = -(-k_count // jobs)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            bounds = range(0, k_count, step)
            list(pool.map(lambda lo: eval_candidates(lo, min(lo + step, k_count)), bounds))
    else:
        eval_candidates(0, k_count)

    mean = costs.mean(axis=0, dtype=np.float64)
    scale = np.divide(1.0, mean, out=np.ones_like(mean), where=mean > 0)
    costs *= scale[None].astype(np.float32)

    return CostVolume(fixed.geometry, g, cand, costs)


def _coupled_argmin(
    costs: np.ndarray,  # (K, M) float32
    cand: np.ndarray,  # (K, 3) float64
    prior: np.ndarray | None,  # (3, M) float64
    theta: float,
    chunk: int = 256,
) -> np.ndarray:
    """Per-point argmin of cost + theta*||delta - prior||²; ties -> lowest index."""
    k_count, m = costs.shape
    best_val = np.full(m, np.inf)
    best_idx = np.zeros(m, dtype=np.int64)
    for lo in range(0, k_count, chunk):
        hi = min(lo + chunk, k_count)
        block = costs[lo:hi].astype(np.float64)
        if prior is not None:
            delta = cand[lo:hi, :, None] - prior[None]
            block = block + theta * np.einsum("kam,kam->km", delta, delta)
        idx = np.argmin(block, axis=0)
        val = np.take_along_axis(block, idx[None], axis=0)[0]
        better = val < best_val
        best_val[better] = val[better]
        best_idx[better] = idx[better] + lo
    return best_idx


def coupled_convex(cost: CostVolume, cfg: ConvexConfig) -> DisplacementField:
    """Iterative candidate selection coupled to a smoothed prior field.

    Starts from the plain per-point argmin; each iteration re-selects the
    candidate minimizing cost plus theta times the squared distance to the
    previous smoothed field, then box-smooths the selection. Returns the
    final smoothed field at control resolution, components within the
    search range.
    """
    cfg.validate()
    mdims = cost.control_dims
    m = int(np.prod(mdims))
    costs = cost.costs.reshape(cost.candidate_count, m)
    cand = cost.candidates

    idx = _coupled_argmin(costs, cand, None, 0.0)
    v = cand[idx].T.copy()  # (3, M) float64
    size = 2 * cfg.smooth_radius + 1
    for theta in cfg.theta_schedule:
        idx = _coupled_argmin(costs, cand, v, float(theta))
        selected = cand[idx].T
        for a in range(3):
            v[a] = uniform_filter(
                selected[a].reshape(mdims), size=size, mode="nearest"
            ).reshape(m)

    geometry = control_geometry(cost.image_geometry, cost.stride)
    return DisplacementField(
        geometry,
        v.reshape(3, *mdims).astype(np.float32),
        RESOLUTION_CONTROL,
        stride=cost.stride,
    )

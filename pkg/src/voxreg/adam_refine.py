"""Continuous refinement of a control-grid displacement field with Adam.

The objective is the mean squared feature residual between the fixed
features and the moving features warped by the trilinearly upsampled
control field, plus a forward-difference smoothness penalty on the control
grid. The data-term gradient is the exact derivative of the edge-clamped
trilinear interpolant (cell-corner differences blended over the remaining
axes), so it matches finite differences of the loss away from cell
boundaries; at exact boundaries the left-cell subgradient is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, NumericalAbortError
from .features import FeatureVolume
from .fields import (
    RESOLUTION_CONTROL,
    DisplacementField,
    control_geometry,
    control_grid_dims,
    control_point_coords,
    sample_field,
    upsample_field,
)
from .volume import _cell_and_frac

__all__ = [
    "AdamConfig",
    "LossValue",
    "LossSample",
    "loss_and_grad",
    "refine",
    "write_loss_trace",
]


@dataclass(frozen=True)
class AdamConfig:
    iterations: int = 80
    learning_rate: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lambda_reg: float = 0.5
    grid_stride: int = 2

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("adam iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("adam learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("adam epsilon must be > 0")
        if self.lambda_reg < 0:
            raise ConfigError("adam lambda_reg must be >= 0")
        if self.grid_stride < 1:
            raise ConfigError("adam grid_stride must be >= 1")


@dataclass(frozen=True)
class LossValue:
    total: float
    data_term: float
    reg_term: float


@dataclass(frozen=True)
class LossSample:
    iteration: int
    data_term: float
    reg_term: float
    total: float


def _interp_matrix(n: int, stride: int, m: int) -> np.ndarray:
    """(n, m) linear-interpolation weights from a vertex-aligned control axis."""
    pos = np.arange(n, dtype=np.float64) / stride
    i0 = np.clip(np.ceil(pos).astype(np.int64) - 1, 0, m - 2)
    frac = pos - i0
    w = np.zeros((n, m))
    w[np.arange(n), i0] = 1.0 - frac
    w[np.arange(n), i0 + 1] += frac
    return w


def _apply_separable(wx, wy, wz, grid: np.ndarray) -> np.ndarray:
    """Contract a 3-D array with one weight matrix per axis."""
    t = np.tensordot(wx, grid, (1, 0))
    t = np.tensordot(wy, t, (1, 1)).transpose(1, 0, 2)
    return np.tensordot(wz, t, (1, 2)).transpose(1, 2, 0)


def loss_and_grad(
    fixed: FeatureVolume,
    moving: FeatureVolume,
    u: np.ndarray,
    cfg: AdamConfig,
) -> tuple[LossValue, np.ndarray]:
    """Objective value and its exact gradient w.r.t. the control field.

    ``u`` has shape (3, mx, my, mz) in image-voxel units on the
    vertex-aligned control grid of ``cfg.grid_stride``. The data term is
    the squared feature residual averaged over voxels and channels; the
    smoothness term is lambda_reg times the mean (over control points)
    squared forward difference of the field. Aborts on non-finite values.
    """
    cfg.validate()
    if fixed.geometry != moving.geometry:
        raise GeometryError(
            f"feature geometries differ: {fixed.geometry} vs {moving.geometry}"
        )
    if fixed.channels != moving.channels:
        raise GeometryError(f"channel mismatch: {fixed.channels} vs {moving.channels}")
    if fixed.stride != 1 or moving.stride != 1:
        raise GeometryError("refinement needs stride-1 (voxel-resolution) features")

    dims = fixed.geometry.dims
    g = cfg.grid_stride
    mdims = control_grid_dims(dims, g)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (3, *mdims):
        raise GeometryError(f"parameter shape {u.shape} does not match (3, {mdims})")

    nx, ny, nz = dims
    n_vox = nx * ny * nz
    chans = fixed.channels
    weights = [_interp_matrix(n, g, m) for n, m in zip(dims, mdims)]

    # dense warp coordinates: identity plus the upsampled control field
    axes_idx = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    pos = [axes_idx[a] + _apply_separable(*weights, u[a]) for a in range(3)]

    px, py, pz = (p.ravel() for p in pos)
    ix0, fx = _cell_and_frac(px, nx)
    iy0, fy = _cell_and_frac(py, ny)
    iz0, fz = _cell_and_frac(pz, nz)
    ix1, iy1, iz1 = ix0 + 1, iy0 + 1, iz0 + 1
    wx0, wy0, wz0 = 1.0 - fx, 1.0 - fy, 1.0 - fz
    # outside the grid the clamped coordinate saturates: derivative zero
    sat = [
        ((p >= 0) & (p <= n - 1)).astype(np.float64)
        for p, n in zip((px, py, pz), dims)
    ]

    fdat = fixed.data.reshape(chans, n_vox)
    data_sum = 0.0
    acc = [np.zeros(n_vox) for _ in range(3)]
    for c in range(chans):
        d3 = moving.data[c].astype(np.float64)
        c000 = d3[ix0, iy0, iz0]
        c100 = d3[ix1, iy0, iz0]
        c010 = d3[ix0, iy1, iz0]
        c110 = d3[ix1, iy1, iz0]
        c001 = d3[ix0, iy0, iz1]
        c101 = d3[ix1, iy0, iz1]
        c011 = d3[ix0, iy1, iz1]
        c111 = d3[ix1, iy1, iz1]

        a00 = c000 * wx0 + c100 * fx
        a10 = c010 * wx0 + c110 * fx
        a01 = c001 * wx0 + c101 * fx
        a11 = c011 * wx0 + c111 * fx
        b0 = a00 * wy0 + a10 * fy
        b1 = a01 * wy0 + a11 * fy
        val = b0 * wz0 + b1 * fz

        resid = fdat[c] - val
        data_sum += float(resid @ resid)

        dx = ((c100 - c000) * wy0 + (c110 - c010) * fy) * wz0 \
            + ((c101 - c001) * wy0 + (c111 - c011) * fy) * fz
        dy = (a10 - a00) * wz0 + (a11 - a01) * fz
        dz = b1 - b0
        acc[0] += resid * dx
        acc[1] += resid * dy
        acc[2] += resid * dz

    denom = chans * n_vox
    data_term = data_sum / denom
    grad = np.empty((3, *mdims))
    for a in range(3):
        dense = (-2.0 / denom) * (acc[a] * sat[a]).reshape(dims)
        grad[a] = _apply_separable(
            weights[0].T, weights[1].T, weights[2].T, dense
        )

    n_ctrl = int(np.prod(mdims))
    reg_sum = 0.0
    scale = cfg.lambda_reg / n_ctrl
    for a in range(3):
        for axis in range(3):
            d = np.diff(u[a], axis=axis)
            reg_sum += float((d * d).sum())
            head = [slice(None)] * 3
            tail = [slice(None)] * 3
            head[axis] = slice(1, None)
            tail[axis] = slice(0, -1)
            grad[a][tuple(head)] += scale * 2.0 * d
            grad[a][tuple(tail)] -= scale * 2.0 * d
    reg_term = cfg.lambda_reg * reg_sum / n_ctrl

    total = data_term + reg_term
    if not (np.isfinite(total) and np.isfinite(grad).all()):
        raise NumericalAbortError("non-finite loss or gradient")
    return LossValue(total, data_term, reg_term), grad


def refine(
    fixed: FeatureVolume,
    moving: FeatureVolume,
    init: DisplacementField | None,
    cfg: AdamConfig,
) -> tuple[DisplacementField, list[LossSample]]:
    """Optimize the control-grid field with Adam from the given start.

    ``init`` may be at full or control resolution (resampled onto this
    stage's control grid as needed) or None for a zero start. Returns the
    final field upsampled to the image grid and one loss sample per
    iteration (recorded before each update). Zero iterations make this a
    resample-and-upsample pass-through.
    """
    cfg.validate()
    image_geom = fixed.geometry
    g = cfg.grid_stride
    mdims = control_grid_dims(image_geom.dims, g)

    if init is None:
        u = np.zeros((3, *mdims))
    elif (
        init.resolution == RESOLUTION_CONTROL
        and init.stride == g
        and init.geometry.dims == mdims
    ):
        u = init.vectors.astype(np.float64)
    else:
        cx, cy, cz = control_point_coords(image_geom.dims, g)
        gx, gy, gz = np.meshgrid(cx, cy, cz, indexing="ij")
        u = sample_field(init, gx, gy, gz)

    m1 = np.zeros_like(u)
    m2 = np.zeros_like(u)
    trace: list[LossSample] = []
    for t in range(1, cfg.iterations + 1):
        try:
            value, grad = loss_and_grad(fixed, moving, u, cfg)
        except NumericalAbortError as e:
            raise NumericalAbortError(
                f"refinement aborted at iteration {t - 1}: {e}", iteration=t - 1
            ) from e
        trace.append(LossSample(t - 1, value.data_term, value.reg_term, value.total))

        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad * grad
        mhat = m1 / (1.0 - cfg.beta1 ** t)
        vhat = m2 / (1.0 - cfg.beta2 ** t)
        u = u - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)

    ctrl = DisplacementField(
        control_geometry(image_geom, g),
        u.astype(np.float32),
        RESOLUTION_CONTROL,
        stride=g,
    )
    return upsample_field(ctrl, image_geom), trace


def write_loss_trace(trace, path, comment: str | None = None) -> None:
    """Write a loss trace as CSV: iteration, data_term, reg_term, total."""
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("iteration,data_term,reg_term,total\n")
        for s in trace:
            f.write(f"{s.iteration},{s.data_term!r},{s.reg_term!r},{s.total!r}\n")

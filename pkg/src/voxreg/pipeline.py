"""End-to-end registration: preprocessing, feature extraction, optional
PCA projection, discrete search, Adam refinement, and warping.

The displacement convention is pullback everywhere: u lives on the fixed
grid and points into moving-image space, so the warped moving image is
``warped(x) = moving(x + u(x))`` and a moving image that equals the fixed
image translated by -t is recovered as u = +t.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .adam_refine import AdamConfig, LossSample, refine
from .convex import ConvexConfig, build_cost_volume, coupled_convex
from .errors import ConfigError, GeometryError
from .features import (
    FeatureVolume,
    MindConfig,
    PcaConfig,
    fit_pca,
    mind_ssc,
    project,
    upsample_features,
)
from .fields import DisplacementField, upsample_field
from .volume import (
    GridGeometry,
    Volume3,
    identity_coords,
    preprocess_ct,
    preprocess_mri,
    trilinear,
)

logger = logging.getLogger(__name__)

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "register",
    "warp_volume",
]

FEATURE_SOURCES = ("mind", "external")
PREPROCESSING_MODES = ("mri", "ct", "none")
STRIDE_POLICIES = ("upsample_to_voxel", "native")


@dataclass(frozen=True)
class RegistrationConfig:
    """Every knob of the registration pipeline, nested per stage."""

    feature_source: str = "mind"
    preprocessing: str = "none"
    feature_stride_policy: str = "upsample_to_voxel"
    pca_enable: bool = True
    mind: MindConfig = dataclass_field(default_factory=MindConfig)
    pca: PcaConfig = dataclass_field(default_factory=PcaConfig)
    convex: ConvexConfig = dataclass_field(default_factory=ConvexConfig)
    adam: AdamConfig = dataclass_field(default_factory=AdamConfig)

    def validate(self):
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(
                f"feature_source must be one of {FEATURE_SOURCES}, "
                f"got {self.feature_source!r}"
            )
        if self.preprocessing not in PREPROCESSING_MODES:
            raise ConfigError(
                f"preprocessing must be one of {PREPROCESSING_MODES}, "
                f"got {self.preprocessing!r}"
            )
        if self.feature_stride_policy not in STRIDE_POLICIES:
            raise ConfigError(
                f"feature_stride_policy must be one of {STRIDE_POLICIES}, "
                f"got {self.feature_stride_policy!r}"
            )
        self.mind.validate()
        self.pca.validate()
        self.convex.validate()
        self.adam.validate()


@dataclass(frozen=True)
class RegistrationResult:
    displacement: DisplacementField  # full resolution, fixed-image grid
    warped_moving: Volume3
    loss_trace: tuple[LossSample, ...]
    timings_ms: dict[str, float]
    config_echo: dict[str, object]


def warp_volume(vol: Volume3, u: DisplacementField) -> Volume3:
    """Pullback warp: output(x) = vol sampled at x + u(x), edge-clamped."""
    if u.geometry.dims != vol.geometry.dims or u.stride != 1:
        raise GeometryError(
            f"field grid {u.geometry.dims} (stride {u.stride}) does not "
            f"match volume dims {vol.geometry.dims}"
        )
    gx, gy, gz = identity_coords(vol.geometry.dims)
    vec = u.vectors.astype(np.float64)
    warped = trilinear(vol.data, gx + vec[0], gy + vec[1], gz + vec[2])
    return Volume3(vol.geometry, warped.astype(np.float32))


def _preprocess(vol: Volume3, mode: str) -> Volume3:
    if mode == "mri":
        return preprocess_mri(vol)
    if mode == "ct":
        return preprocess_ct(vol)
    return vol


def _check_token_grid(fv: FeatureVolume, image: GridGeometry) -> None:
    expected = tuple(-(-n // fv.stride) for n in image.dims)
    if fv.geometry.dims != expected:
        raise GeometryError(
            f"feature grid {fv.geometry.dims} at stride {fv.stride} does not "
            f"cover image dims {image.dims} (expected {expected})"
        )


def _upsample_token_field(
    field: DisplacementField, stride: int, target: GridGeometry
) -> DisplacementField:
    """Dense field from a token-grid field with patch-centered cells.

    Token t covers image voxels [t*s, (t+1)*s), so its center sits at
    t*s + (s-1)/2; vectors are scaled from token cells to image voxels.
    """
    gx, gy, gz = identity_coords(target.dims)
    half = (stride - 1) / 2.0
    coords = ((gx - half) / stride, (gy - half) / stride, (gz - half) / stride)
    out = np.empty((3, *target.dims), dtype=np.float32)
    for a in range(3):
        out[a] = trilinear(field.vectors[a], *coords) * stride
    return DisplacementField(target, out)


def register(
    fixed: Volume3,
    moving: Volume3,
    cfg: RegistrationConfig | None = None,
    external_feats: tuple[FeatureVolume, FeatureVolume] | None = None,
) -> RegistrationResult:
    """Run the full pipeline on one image pair.

    With feature_source "mind" the descriptors are computed from the
    (optionally preprocessed) inputs; with "external" the caller supplies a
    (fixed, moving) pair of feature volumes, typically token-resolution
    files produced by a pretrained encoder. PCA projection engages only
    when the channel count exceeds the configured component count. The
    returned displacement is always full resolution on the fixed grid in
    image-voxel units; the warped output resamples the original (not
    preprocessed) moving image.
    """
    cfg = cfg or RegistrationConfig()
    cfg.validate()
    if fixed.geometry != moving.geometry:
        raise GeometryError(
            f"fixed and moving geometries differ: {fixed.geometry} vs "
            f"{moving.geometry}; resample first"
        )
    if (external_feats is not None) != (cfg.feature_source == "external"):
        raise ConfigError(
            "external features must be supplied exactly when "
            "feature_source = external"
        )

    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    pre_fixed = _preprocess(fixed, cfg.preprocessing)
    pre_moving = _preprocess(moving, cfg.preprocessing)
    timings["preprocess_ms"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    token_stride = 1
    if cfg.feature_source == "mind":
        f_fixed = mind_ssc(pre_fixed, cfg.mind)
        f_moving = mind_ssc(pre_moving, cfg.mind)
    else:
        f_fixed, f_moving = external_feats
        if f_fixed.channels != f_moving.channels:
            raise GeometryError(
                f"external feature channels differ: {f_fixed.channels} vs "
                f"{f_moving.channels}"
            )
        if f_fixed.stride != f_moving.stride or f_fixed.geometry != f_moving.geometry:
            raise GeometryError("external feature grids differ between fixed and moving")
        _check_token_grid(f_fixed, fixed.geometry)
        token_stride = f_fixed.stride
        if cfg.feature_stride_policy == "upsample_to_voxel" and token_stride > 1:
            f_fixed = upsample_features(f_fixed, fixed.geometry)
            f_moving = upsample_features(f_moving, fixed.geometry)
            token_stride = 1
    timings["features_ms"] = (time.perf_counter() - t0) * 1000.0

    # in native mode the token grid becomes the working grid: stages see
    # stride-1 features on it and produce token-cell displacements
    native = token_stride > 1
    if native:
        work_geom = GridGeometry(
            f_fixed.geometry.dims, f_fixed.geometry.spacing
        )
        f_fixed = FeatureVolume(work_geom, f_fixed.data, stride=1)
        f_moving = FeatureVolume(work_geom, f_moving.data, stride=1)

    t0 = time.perf_counter()
    pca_applied = False
    if cfg.pca_enable and f_fixed.channels > cfg.pca.components:
        basis = fit_pca(f_fixed, f_moving, cfg.pca)
        f_fixed = project(f_fixed, basis)
        f_moving = project(f_moving, basis)
        pca_applied = True
    timings["pca_ms"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    cost = build_cost_volume(f_fixed, f_moving, cfg.convex)
    coarse = coupled_convex(cost, cfg.convex)
    timings["convex_ms"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    dense_work, trace = refine(f_fixed, f_moving, coarse, cfg.adam)
    timings["adam_ms"] = (time.perf_counter() - t0) * 1000.0

    if native:
        displacement = _upsample_token_field(
            dense_work, token_stride, fixed.geometry
        )
    else:
        displacement = upsample_field(dense_work, fixed.geometry)

    warped = warp_volume(moving, displacement)
    timings["total_ms"] = (time.perf_counter() - t_start) * 1000.0

    from .config import config_echo

    echo = config_echo(cfg)
    echo["pca_applied"] = pca_applied
    return RegistrationResult(
        displacement=displacement,
        warped_moving=warped,
        loss_trace=tuple(trace),
        timings_ms=timings,
        config_echo=echo,
    )

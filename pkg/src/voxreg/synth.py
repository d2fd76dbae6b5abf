"""Synthetic test data: smooth folding-free displacement fields, textured
volumes, and blob segmentations with exact ground truth.

The generated truth field is, by construction, the field the registration
pipeline is expected to output for the pair: the moving image is the fixed
image warped by the *inverse* of the truth, so pulling the moving image
back by the truth reproduces the fixed image. See the README for a worked
one-dimensional example of this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GeometryError
from .fields import DisplacementField, invert_field
from .metrics import LabelVolume, jacobian_stats, warp_labels
from .pipeline import warp_volume
from .volume import GridGeometry, Volume3, identity_coords, trilinear

__all__ = [
    "SynthConfig",
    "random_smooth_field",
    "make_texture",
    "make_blobs",
    "make_pair",
    "endpoint_error",
    "with_seed",
]

TEXTURES = ("smooth-noise", "checker")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    coarse_dims: tuple[int, int, int] = (5, 5, 5)
    smoothing_sigma: float = 2.0
    magnitude_cap: float = 6.0
    texture: str = "smooth-noise"
    texture_param: float = 3.0
    blob_count: int = 5

    def validate(self):
        if len(self.coarse_dims) != 3 or any(d < 2 for d in self.coarse_dims):
            raise ConfigError(f"coarse_dims must be 3 values >= 2, got {self.coarse_dims}")
        if not self.smoothing_sigma > 0:
            raise ConfigError("smoothing_sigma must be > 0")
        if not self.magnitude_cap > 0:
            raise ConfigError("magnitude_cap must be > 0")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if not self.texture_param > 0:
            raise ConfigError("texture_param must be > 0")
        if self.blob_count < 1:
            raise ConfigError("blob_count must be >= 1")


def _field_from_rng(geom: GridGeometry, cfg: SynthConfig, rng) -> DisplacementField:
    coarse = rng.standard_normal((3, *cfg.coarse_dims))
    gx, gy, gz = identity_coords(geom.dims)
    coords = [
        g * ((m - 1) / (n - 1))
        for g, m, n in zip((gx, gy, gz), cfg.coarse_dims, geom.dims)
    ]
    u = np.stack([trilinear(coarse[a], *coords) for a in range(3)])
    u = gaussian_filter(u, sigma=(0.0, *([cfg.smoothing_sigma] * 3)), mode="nearest")

    amax = float(np.abs(u).max())
    if amax > 0:
        u *= cfg.magnitude_cap / amax

    for _ in range(6):
        field = DisplacementField(geom, u.astype(np.float32))
        _, folding = jacobian_stats(field)
        if folding == 0.0:
            return field
        u *= 0.5
    raise ConfigError(
        "could not generate a folding-free field after 5 magnitude halvings; "
        "lower magnitude_cap or raise smoothing_sigma"
    )


def random_smooth_field(geom: GridGeometry, cfg: SynthConfig) -> DisplacementField:
    """Smooth random displacement field, verified folding-free.

    Gaussian noise on a coarse grid is trilinearly upsampled, Gaussian
    smoothed, and scaled so the largest component magnitude equals
    magnitude_cap; if the result folds, the magnitude is halved and
    re-verified (up to 5 times).
    """
    cfg.validate()
    return _field_from_rng(geom, cfg, np.random.default_rng([cfg.seed, 1]))


def make_texture(geom: GridGeometry, cfg: SynthConfig, rng=None) -> Volume3:
    """Textured volume in [0, 1]: smoothed noise or a checkerboard."""
    cfg.validate()
    if cfg.texture == "checker":
        gx, gy, gz = identity_coords(geom.dims)
        p = max(1, int(round(cfg.texture_param)))
        data = ((gx // p + gy // p + gz // p) % 2).astype(np.float32)
        return Volume3(geom, data)
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 0])
    noise = gaussian_filter(
        rng.standard_normal(geom.dims), sigma=cfg.texture_param, mode="nearest"
    )
    lo, hi = float(noise.min()), float(noise.max())
    if not hi > lo:
        return Volume3(geom, np.zeros(geom.dims, dtype=np.float32))
    return Volume3(geom, ((noise - lo) / (hi - lo)).astype(np.float32))


def make_blobs(geom: GridGeometry, cfg: SynthConfig, rng=None) -> LabelVolume:
    """Segmentation of randomly placed solid spheres, labels 1..blob_count."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 2])
    dims = np.array(geom.dims, dtype=np.float64)
    gx, gy, gz = identity_coords(geom.dims)
    labels = np.zeros(geom.dims, dtype=np.int32)
    r_lo, r_hi = dims.min() / 10.0, dims.min() / 5.0
    for lab in range(1, cfg.blob_count + 1):
        center = rng.uniform(0.2, 0.8, size=3) * (dims - 1)
        radius = rng.uniform(r_lo, r_hi)
        d2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2
        labels[d2 <= radius * radius] = lab
    return LabelVolume(geom, labels)


def make_pair(
    geom: GridGeometry, cfg: SynthConfig
) -> tuple[Volume3, Volume3, DisplacementField, LabelVolume, LabelVolume]:
    """(fixed, moving, truth, fixed_seg, moving_seg) with exact ground truth.

    The truth field is what registering (fixed, moving) should recover:
    warping the moving image by it reproduces the fixed image (up to
    interpolation), because the moving image and segmentation are built by
    warping the fixed ones with the truth's inverse.
    """
    cfg.validate()
    fixed = make_texture(geom, cfg)
    truth = random_smooth_field(geom, cfg)
    inverse = invert_field(truth)
    moving = warp_volume(fixed, inverse)
    fixed_seg = make_blobs(geom, cfg)
    moving_seg = warp_labels(fixed_seg, inverse)
    return fixed, moving, truth, fixed_seg, moving_seg


def endpoint_error(a: DisplacementField, b: DisplacementField) -> float:
    """Mean Euclidean distance between two fields' vectors, in voxels."""
    if a.geometry.dims != b.geometry.dims:
        raise GeometryError("endpoint_error needs fields on the same grid")
    diff = a.vectors.astype(np.float64) - b.vectors.astype(np.float64)
    return float(np.sqrt((diff ** 2).sum(axis=0)).mean())


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    """Copy of the config with a different seed (helper for pair batches)."""
    return replace(cfg, seed=seed)

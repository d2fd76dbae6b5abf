"""Dense feature volumes: MIND self-similarity descriptors, externally
computed feature ingestion, and PCA projection to a shared basis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, DataError, GeometryError
from .volume import GridGeometry, Volume3, _freeze, identity_coords, trilinear

__all__ = [
    "FeatureVolume",
    "MindConfig",
    "PcaConfig",
    "PcaBasis",
    "mind_ssc",
    "volume_to_features",
    "ingest_features",
    "fit_pca",
    "project",
    "reconstruct",
    "upsample_features",
    "save_basis",
    "load_basis",
]


@dataclass(frozen=True)
class FeatureVolume:
    """Multi-channel dense feature grid.

    ``stride`` records how many image voxels one feature cell covers
    (1 for voxel-resolution descriptors, the token patch size for learned
    features before upsampling). ``geometry`` describes the feature grid
    itself, so its spacing is stride times the source voxel spacing.
    """

    geometry: GridGeometry
    data: np.ndarray  # (channels, nx, ny, nz) float32
    stride: int = 1

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if arr.ndim != 4 or arr.shape[1:] != self.geometry.dims:
            raise GeometryError(
                f"feature data shape {arr.shape} does not match (C, {self.geometry.dims})"
            )
        if arr.shape[0] < 1:
            raise GeometryError("feature volume needs at least one channel")
        if not np.isfinite(arr).all():
            raise DataError("feature volume contains non-finite values")
        if int(self.stride) < 1:
            raise GeometryError("stride must be >= 1")
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def volume_to_features(vol: Volume3) -> FeatureVolume:
    """Wrap a scalar volume as a single-channel feature volume."""
    return FeatureVolume(vol.geometry, vol.data[None], stride=1)


# ---------------------------------------------------------------------------
# MIND self-similarity-context descriptor

@dataclass(frozen=True)
class MindConfig:
    """Parameters of the 12-channel self-similarity-context descriptor."""

    dilation: int = 2
    patch_radius: int = 1
    variance_clamp: tuple[float, float] = (0.001, 1000.0)

    def validate(self):
        if self.dilation < 1:
            raise ConfigError("mind dilation must be >= 1")
        if self.patch_radius < 1:
            raise ConfigError("mind patch_radius must be >= 1")
        lo, hi = self.variance_clamp
        if not (0 < lo < 1 < hi):
            raise ConfigError("variance clamp factors must satisfy 0 < lo < 1 < hi")


def _six_neighborhood(d: int):
    return [
        (d, 0, 0), (-d, 0, 0),
        (0, d, 0), (0, -d, 0),
        (0, 0, d), (0, 0, -d),
    ]


def _orthogonal_pairs(offsets):
    """The 12 unordered pairs of edge-adjacent (orthogonal) offsets."""
    pairs = []
    for i, j in itertools.combinations(range(len(offsets)), 2):
        a, b = offsets[i], offsets[j]
        if sum(x * y for x, y in zip(a, b)) == 0:
            pairs.append((a, b))
    return pairs


def _shift_clamped(padded: np.ndarray, offset, pad: int) -> np.ndarray:
    """View of an edge-padded array shifted by an integer offset."""
    sl = tuple(
        slice(pad + o, pad + o + n)
        for o, n in zip(offset, np.asarray(padded.shape) - 2 * pad)
    )
    return padded[sl]


def mind_ssc(vol: Volume3, cfg: MindConfig | None = None) -> FeatureVolume:
    """12-channel MIND self-similarity-context descriptor.

    Each channel holds exp(-D_c / V) where D_c is the box-aggregated squared
    patch difference between one pair of edge-adjacent offsets of the
    6-neighborhood at the configured dilation, and V is the per-voxel mean
    of the 12 distances clamped to a band around its volume-wide mean.
    Values lie in (0, 1]; descriptors are invariant to global positive
    affine intensity maps.
    """
    cfg = cfg or MindConfig()
    cfg.validate()
    d, r = cfg.dilation, cfg.patch_radius
    reach = 2 * (d + r)
    if any(n <= reach for n in vol.geometry.dims):
        raise GeometryError(
            f"volume dims {vol.geometry.dims} too small for dilation {d}, radius {r}"
        )

    img = vol.data.astype(np.float32)
    padded = np.pad(img, d, mode="edge")
    size = 2 * r + 1
    pairs = _orthogonal_pairs(_six_neighborhood(d))

    dist = np.empty((len(pairs), *vol.geometry.dims), dtype=np.float32)
    for c, (oa, ob) in enumerate(pairs):
        diff = _shift_clamped(padded, oa, d) - _shift_clamped(padded, ob, d)
        dist[c] = uniform_filter(diff * diff, size=size, mode="nearest")

    variance = dist.mean(axis=0)
    vbar = float(variance.mean())
    lo, hi = cfg.variance_clamp
    variance = np.clip(variance, lo * vbar, hi * vbar)
    # an all-constant image has zero distances everywhere; exp(0) = 1
    ratio = np.divide(
        dist, variance, out=np.zeros_like(dist), where=variance > 0
    )
    return FeatureVolume(vol.geometry, np.exp(-ratio), stride=1)


# ---------------------------------------------------------------------------
# external feature ingestion

def ingest_features(path) -> FeatureVolume:
    """Read a feature volume from an FVL1 exchange file."""
    from .io_formats import read_fvl1

    return read_fvl1(path)


# ---------------------------------------------------------------------------
# PCA projection (randomized range-finding SVD)

@dataclass(frozen=True)
class PcaConfig:
    components: int = 24
    oversampling: int = 8
    power_iterations: int = 2
    sample_cap: int = 100_000
    seed: int = 0

    def validate(self):
        if self.components < 1:
            raise ConfigError("pca components must be >= 1")
        if self.oversampling < 0 or self.power_iterations < 0:
            raise ConfigError("pca oversampling and power_iterations must be >= 0")
        if self.sample_cap < 2:
            raise ConfigError("pca sample_cap must be >= 2")


@dataclass(frozen=True)
class PcaBasis:
    """Affine projection basis: per-channel mean and orthonormal components."""

    mean: np.ndarray  # (C,) float64
    components: np.ndarray  # (C, k) float64, orthonormal columns
    singular_values: np.ndarray  # (k,) float64

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(
            self, "components", np.asarray(self.components, dtype=np.float64)
        )
        object.__setattr__(
            self, "singular_values", np.asarray(self.singular_values, dtype=np.float64)
        )

    @property
    def input_channels(self) -> int:
        return self.components.shape[0]

    @property
    def output_channels(self) -> int:
        return self.components.shape[1]


def _draw_samples(fv: FeatureVolume, cap: int, rng) -> np.ndarray:
    """Up to ``cap`` per-voxel feature vectors as rows, seed-deterministic."""
    flat = fv.data.reshape(fv.channels, -1)
    n = flat.shape[1]
    if n <= cap:
        return flat.T.astype(np.float64)
    idx = np.sort(rng.choice(n, size=cap, replace=False))
    return flat[:, idx].T.astype(np.float64)


def fit_pca(a: FeatureVolume, b: FeatureVolume, cfg: PcaConfig | None = None) -> PcaBasis:
    """Fit one joint basis on voxel samples pooled from both volumes.

    Uses Gaussian range finding with oversampling and power iterations on
    the centered sample matrix; identical seeds reproduce identical bases.
    """
    cfg = cfg or PcaConfig()
    cfg.validate()
    if a.channels != b.channels:
        raise GeometryError(
            f"channel mismatch: {a.channels} vs {b.channels}"
        )
    n_ch = a.channels
    k, p = cfg.components, cfg.oversampling
    if k + p > n_ch:
        raise ConfigError(
            f"components + oversampling ({k}+{p}) exceeds channel count {n_ch}"
        )

    rng = np.random.default_rng(cfg.seed)
    cap_each = max(1, cfg.sample_cap // 2)
    samples = np.vstack(
        [_draw_samples(a, cap_each, rng), _draw_samples(b, cap_each, rng)]
    )
    mean = samples.mean(axis=0)
    centered = samples - mean

    sketch = rng.standard_normal((n_ch, k + p))
    basis_range = np.linalg.qr(centered @ sketch, mode="reduced")[0]
    for _ in range(cfg.power_iterations):
        basis_range = np.linalg.qr(
            centered @ (centered.T @ basis_range), mode="reduced"
        )[0]
    small = basis_range.T @ centered
    _, svals, vt = np.linalg.svd(small, full_matrices=False)
    return PcaBasis(mean=mean, components=vt[:k].T, singular_values=svals[:k])


def project(fv: FeatureVolume, basis: PcaBasis) -> FeatureVolume:
    """Project every voxel's feature vector onto the basis: y = W^T (x - mu)."""
    if fv.channels != basis.input_channels:
        raise GeometryError(
            f"feature channels {fv.channels} do not match basis {basis.input_channels}"
        )
    flat = fv.data.reshape(fv.channels, -1).astype(np.float64)
    projected = basis.components.T @ (flat - basis.mean[:, None])
    out = projected.reshape(basis.output_channels, *fv.geometry.dims)
    return FeatureVolume(fv.geometry, out.astype(np.float32), stride=fv.stride)


def reconstruct(fv: FeatureVolume, basis: PcaBasis) -> FeatureVolume:
    """Back-project a projected volume: x = W y + mu."""
    if fv.channels != basis.output_channels:
        raise GeometryError(
            f"feature channels {fv.channels} do not match basis rank {basis.output_channels}"
        )
    flat = fv.data.reshape(fv.channels, -1).astype(np.float64)
    restored = basis.components @ flat + basis.mean[:, None]
    out = restored.reshape(basis.input_channels, *fv.geometry.dims)
    return FeatureVolume(fv.geometry, out.astype(np.float32), stride=fv.stride)


def save_basis(basis: PcaBasis, path) -> None:
    np.savez(
        path,
        mean=basis.mean,
        components=basis.components,
        singular_values=basis.singular_values,
    )


def load_basis(path) -> PcaBasis:
    with np.load(path) as f:
        return PcaBasis(
            mean=f["mean"],
            components=f["components"],
            singular_values=f["singular_values"],
        )


# ---------------------------------------------------------------------------
# stride handling

def upsample_features(fv: FeatureVolume, target: GridGeometry) -> FeatureVolume:
    """Bring token-resolution features to voxel resolution.

    Feature cells are treated as patch-centered: cell t covers image voxels
    [t*s, (t+1)*s), so its value sits at image coordinate t*s + (s-1)/2.
    Each channel is trilinearly interpolated onto the target grid; stride 1
    input matching the target is returned unchanged.
    """
    s = fv.stride
    if s == 1 and fv.geometry.dims == target.dims:
        return fv
    gx, gy, gz = identity_coords(target.dims)
    half = (s - 1) / 2.0
    tx, ty, tz = (gx - half) / s, (gy - half) / s, (gz - half) / s
    out = np.empty((fv.channels, *target.dims), dtype=np.float32)
    for c in range(fv.channels):
        out[c] = trilinear(fv.data[c], tx, ty, tz)
    return FeatureVolume(target, out, stride=1)

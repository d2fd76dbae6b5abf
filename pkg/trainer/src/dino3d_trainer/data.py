"""Training data: synthetic shape volumes, NIfTI folders, augmentations."""

import logging
from pathlib import Path

import numpy as np

from .nifti_io import read_volume

logger = logging.getLogger(__name__)


def _box_blur(vol, radius=1, passes=2):
    """Separable box blur; repeated passes approximate a Gaussian."""
    out = vol.astype(np.float32)
    size = 2 * radius + 1
    n = out.shape[0]  # cubic volumes only
    for _ in range(passes):
        for axis in range(3):
            pad = [(0, 0)] * 3
            pad[axis] = (radius, radius)
            padded = np.pad(out, pad, mode="edge")
            acc = np.zeros_like(out)
            for k in range(size):
                acc += padded.take(range(k, k + n), axis=axis)
            out = acc / size
    return out


def make_shape_volume(rng, dims=40):
    """Random soft ellipsoids and boxes on a dark background, in [0, 1]."""
    vol = np.zeros((dims, dims, dims), dtype=np.float32)
    grid = np.stack(np.meshgrid(*[np.arange(dims)] * 3, indexing="ij"))
    for _ in range(int(rng.integers(3, 7))):
        center = rng.uniform(0.2 * dims, 0.8 * dims, size=3)
        value = float(rng.uniform(0.3, 1.0))
        if rng.random() < 0.5:
            radii = rng.uniform(0.08 * dims, 0.25 * dims, size=3)
            dist = (((grid - center[:, None, None, None]) /
                     radii[:, None, None, None]) ** 2).sum(axis=0)
            vol = np.maximum(vol, np.where(dist <= 1.0, value, 0.0).astype(np.float32))
        else:
            half = rng.uniform(0.06 * dims, 0.2 * dims, size=3)
            inside = np.all(
                np.abs(grid - center[:, None, None, None]) <= half[:, None, None, None],
                axis=0,
            )
            vol = np.maximum(vol, np.where(inside, value, 0.0).astype(np.float32))
    vol = _box_blur(vol, radius=1, passes=2)
    vol += rng.normal(0.0, 0.02, size=vol.shape).astype(np.float32)
    lo, hi = float(vol.min()), float(vol.max())
    if hi > lo:
        vol = (vol - lo) / (hi - lo)
    return vol.astype(np.float32)


class ShapeDataset:
    """Endless stream of seeded synthetic shape volumes."""

    def __init__(self, dims=40, seed=0):
        self.dims = dims
        self.rng = np.random.default_rng(seed)

    def sample(self):
        return make_shape_volume(self.rng, self.dims)

    def rng_state(self):
        return self.rng.bit_generator.state

    def set_rng_state(self, state):
        self.rng.bit_generator.state = state


class VolumeFolderDataset:
    """Cycles through every readable NIfTI volume below a directory."""

    def __init__(self, root, seed=0):
        paths = sorted(
            p for p in Path(root).rglob("*")
            if p.suffix == ".nii" or p.name.endswith(".nii.gz")
        )
        if not paths:
            raise ValueError(f"no .nii/.nii.gz volumes under {root}")
        self.volumes = []
        for p in paths:
            data, _ = read_volume(p)
            lo, hi = float(data.min()), float(data.max())
            if hi > lo:
                data = (data - lo) / (hi - lo)
            self.volumes.append(data.astype(np.float32))
        logger.info("loaded %d volumes from %s", len(self.volumes), root)
        self.rng = np.random.default_rng(seed)

    def sample(self):
        return self.volumes[int(self.rng.integers(len(self.volumes)))]

    def rng_state(self):
        return self.rng.bit_generator.state

    def set_rng_state(self, state):
        self.rng.bit_generator.state = state


def random_crop(vol, size, rng):
    """Random cubic crop; smaller volumes are edge-padded first."""
    pads = [(0, max(0, size - n)) for n in vol.shape]
    if any(p[1] for p in pads):
        vol = np.pad(vol, pads, mode="edge")
    starts = [int(rng.integers(0, n - size + 1)) for n in vol.shape]
    return vol[
        starts[0]:starts[0] + size,
        starts[1]:starts[1] + size,
        starts[2]:starts[2] + size,
    ]


def rotate90(vol, k1, k2):
    """Right-angle rotation: k1 quarter turns in the xy plane, k2 in yz."""
    out = vol
    if k1:
        out = np.rot90(out, k=k1, axes=(0, 1))
    if k2:
        out = np.rot90(out, k=k2, axes=(1, 2))
    return out


def intensity_jitter(crop, rng):
    """Gamma jitter plus additive Gaussian noise. Returns float32."""
    gamma = float(rng.uniform(0.7, 1.4))
    out = np.clip(crop, 0.0, 1.0) ** gamma
    sigma = float(rng.uniform(0.0, 0.05))
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(crop, rng):
    """Random right-angle rotation followed by intensity jitter."""
    k1 = int(rng.integers(0, 4))
    k2 = int(rng.integers(0, 4))
    return intensity_jitter(rotate90(crop, k1, k2), rng)


def _jittered_starts(base, limit, jitter, rng):
    return [
        int(np.clip(b + rng.integers(-jitter, jitter + 1), 0, hi))
        for b, hi in zip(base, limit)
    ]


def two_views(vol, crop_size, rng, jitter=4):
    """Two overlapping crops sharing one rotation, jittered independently.

    The crops come from nearby corners (offset by at most ``jitter``
    voxels per axis) and receive the same right-angle rotation, so their
    content largely agrees; gamma and noise are drawn per view. This
    keeps the cross-view prediction task solvable at short horizons
    while still exercising intensity invariance.
    """
    pads = [(0, max(0, crop_size - n)) for n in vol.shape]
    if any(p[1] for p in pads):
        vol = np.pad(vol, pads, mode="edge")
    limit = [n - crop_size for n in vol.shape]
    base = [int(rng.integers(0, hi + 1)) for hi in limit]
    k1 = int(rng.integers(0, 4))
    k2 = int(rng.integers(0, 4))
    views = []
    for _ in range(2):
        s = _jittered_starts(base, limit, jitter, rng)
        crop = vol[s[0]:s[0] + crop_size,
                   s[1]:s[1] + crop_size,
                   s[2]:s[2] + crop_size]
        views.append(intensity_jitter(rotate90(crop, k1, k2), rng))
    return views[0], views[1]

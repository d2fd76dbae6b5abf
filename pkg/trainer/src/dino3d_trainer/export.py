"""Dense feature export: run the trained backbone over a whole volume.

The volume is tiled into non-overlapping windows of the training crop
size (edge-padded to a multiple of the window), each window is encoded,
and the patch-token grids are stitched back together. The result is one
embedding per patch cell, written in the exchange feature format with
stride equal to the patch size so downstream tools can map tokens back
to voxel coordinates.
"""

import logging

import numpy as np
import torch

from .fvl1_io import write_features
from .nifti_io import read_volume

logger = logging.getLogger(__name__)


def _ceil_div(a, b):
    return -(-a // b)


def encode_volume(backbone, vol, crop_size):
    """Return a (C, tx, ty, tz) float32 token-embedding grid for ``vol``."""
    patch = backbone.cfg.patch_size
    dims = vol.shape
    token_dims = tuple(_ceil_div(d, patch) for d in dims)
    padded_dims = tuple(_ceil_div(d, crop_size) * crop_size for d in dims)
    pad = [(0, padded_dims[a] - dims[a]) for a in range(3)]
    padded = np.pad(vol.astype(np.float32), pad, mode="edge")

    tpw = crop_size // patch  # tokens per window axis
    grid_shape = tuple(p // patch for p in padded_dims)
    grid = np.zeros((backbone.cfg.embed_dim,) + grid_shape, dtype=np.float32)

    backbone.eval()
    with torch.no_grad():
        for wx in range(0, padded_dims[0], crop_size):
            for wy in range(0, padded_dims[1], crop_size):
                for wz in range(0, padded_dims[2], crop_size):
                    window = padded[wx:wx + crop_size,
                                    wy:wy + crop_size,
                                    wz:wz + crop_size]
                    x = torch.from_numpy(window)[None, None]
                    _, tokens = backbone(x)
                    cube = (
                        tokens[0]
                        .reshape(tpw, tpw, tpw, backbone.cfg.embed_dim)
                        .permute(3, 0, 1, 2)
                        .numpy()
                    )
                    tx, ty, tz = wx // patch, wy // patch, wz // patch
                    grid[:, tx:tx + tpw, ty:ty + tpw, tz:tz + tpw] = cube

    return grid[:, : token_dims[0], : token_dims[1], : token_dims[2]]


def export_features(backbone, volume_path, out_path, crop_size):
    """Encode the volume at ``volume_path`` and write the token features.

    Embeddings are centered (mean token subtracted per volume) and then
    L2-normalized per token before writing: transformer tokens share a
    large volume-global component that would otherwise dominate distance-
    based matching costs, and unit-norm tokens make those costs compare
    local patterns instead of magnitudes.
    """
    vol, spacing = read_volume(volume_path)
    grid = encode_volume(backbone, vol, crop_size)
    grid = grid - grid.reshape(grid.shape[0], -1).mean(axis=1)[:, None, None, None]
    grid = grid / (np.sqrt((grid ** 2).sum(axis=0, keepdims=True)) + 1e-6)
    patch = backbone.cfg.patch_size
    spacing_out = tuple(s * patch for s in spacing)
    write_features(grid, patch, out_path, spacing=spacing_out)
    logger.info(
        "exported %s -> %s: %d channels on a %s token grid (stride %d)",
        volume_path, out_path, grid.shape[0], grid.shape[1:], patch,
    )
    return grid.shape

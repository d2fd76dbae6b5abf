"""File I/O: a deliberately small NIfTI-1 reader/writer and the FVL1
binary exchange format for feature volumes and displacement fields.

NIfTI support covers exactly what the pipeline needs: single-file ``.nii``
or ``.nii.gz``, axis-aligned geometry, scalar datatypes uint8 / int16 /
float32 / float64, and scl_slope/scl_inter rescaling. Anything else is
rejected with a specific error rather than silently misread.

FVL1 is a little-endian container: a fixed 44-byte header followed by the
channel planes in x-fastest order.

    offset  size  field
    0       4     magic "FVL1"
    4       4     u32 version (1)
    8       12    u32 nx, ny, nz        grid dimensions
    20      4     u32 channels
    24      12    f32 sx, sy, sz        grid spacing in mm
    36      4     u32 stride            image voxels per grid cell
    40      1     u8  dtype (0 = float32)
    41      3     zero padding
"""

from __future__ import annotations

import gzip
import logging
import struct

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    FormatError,
    NonFiniteDataError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VersionError,
)
from .fields import RESOLUTION_CONTROL, RESOLUTION_FULL, DisplacementField
from .volume import GridGeometry, Volume3

logger = logging.getLogger(__name__)

__all__ = [
    "read_nifti",
    "write_nifti",
    "read_labels",
    "read_fvl1",
    "write_fvl1",
    "read_displacement",
    "write_displacement",
]

# ---------------------------------------------------------------------------
# NIfTI-1 subset

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_HDR_SIZE = 348


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _unpack(fmt: str, buf: bytes, offset: int):
    return struct.unpack_from(fmt, buf, offset)


def read_nifti(path) -> Volume3:
    """Read a single-file NIfTI-1 volume (optionally gzipped)."""
    with _open_maybe_gzip(path) as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise TruncatedPayloadError(
            f"{path}: file shorter than the 348-byte header ({len(raw)} bytes)"
        )

    magic = _unpack("<4s", raw, 344)[0]
    if magic[:3] == b"ni1":
        raise FormatError(
            f"{path}: two-file (.hdr/.img) NIfTI pairs are not supported"
        )
    if magic[:3] != b"n+1":
        raise BadMagicError(f"{path}: not a NIfTI-1 file (magic {magic!r})")

    # byte order is not stored explicitly; dim[0] must land in 1..7
    order = "<"
    ndim = _unpack("<h", raw, 40)[0]
    if not 1 <= ndim <= 7:
        order = ">"
        ndim = _unpack(">h", raw, 40)[0]
        if not 1 <= ndim <= 7:
            raise FormatError(f"{path}: implausible dim[0] in either byte order")

    dim = _unpack(order + "8h", raw, 40)
    datatype = _unpack(order + "h", raw, 70)[0]
    pixdim = _unpack(order + "8f", raw, 76)
    vox_offset = int(_unpack(order + "f", raw, 108)[0])
    scl_slope, scl_inter = _unpack(order + "2f", raw, 112)

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(
            f"{path}: NIfTI datatype code {datatype} not supported "
            f"(supported: {sorted(_NIFTI_DTYPES)})"
        )
    extra = [d for d in dim[4:1 + dim[0]] if d > 1]
    if dim[0] > 3 and extra:
        raise DataError(f"{path}: only scalar 3-D volumes supported, dim={dim[:8]}")
    dims = tuple(int(d) if i < dim[0] else 1 for i, d in enumerate(dim[1:4]))
    if any(d < 2 for d in dims):
        raise DataError(f"{path}: degenerate volume dims {dims}")

    sform_code = _unpack(order + "h", raw, 254)[0]
    srow = np.array(_unpack(order + "12f", raw, 280)).reshape(3, 4)
    if sform_code > 0:
        off_diag = srow[:, :3] - np.diag(np.diag(srow[:, :3]))
        if np.abs(off_diag).max() > 1e-3 * max(1.0, np.abs(srow[:, :3]).max()):
            logger.warning(
                "%s: non-axis-aligned orientation matrix ignored; "
                "grid treated as axis-aligned", path,
            )

    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])

    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(dims))
    payload = raw[max(vox_offset, _HDR_SIZE):]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"need {count * dtype.itemsize}"
        )
    data = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float64)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * scl_slope + scl_inter

    bad = count - int(np.isfinite(data).sum())
    if bad:
        raise NonFiniteDataError(f"{path}: payload contains {bad} non-finite values")

    grid = data.reshape(dims, order="F")
    return Volume3(GridGeometry(dims, spacing), grid.astype(np.float32))


def write_nifti(vol: Volume3, path) -> None:
    """Write a volume as single-file little-endian float32 NIfTI-1."""
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    nx, ny, nz = vol.geometry.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # datatype float32, bitpix
    sx, sy, sz = vol.geometry.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, 0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)
        f.write(np.asfortranarray(vol.data.astype("<f4")).tobytes(order="F"))


def read_labels(path):
    """Read an integer segmentation volume from NIfTI."""
    from .metrics import LabelVolume

    vol = read_nifti(path)
    data = vol.data
    rounded = np.rint(data)
    if np.abs(data - rounded).max() > 1e-3:
        raise DataError(f"{path}: segmentation volume has non-integer values")
    return LabelVolume(vol.geometry, rounded.astype(np.int32))


# ---------------------------------------------------------------------------
# FVL1 feature exchange format

_FVL1_HEADER = struct.Struct("<4sI3II3fIB3x")
_FVL1_MAGIC = b"FVL1"
_FVL1_VERSION = 1
_FVL1_DTYPE_F32 = 0


def write_fvl1(features, path) -> None:
    """Write a feature volume to the FVL1 container."""
    nx, ny, nz = features.geometry.dims
    sx, sy, sz = features.geometry.spacing
    header = _FVL1_HEADER.pack(
        _FVL1_MAGIC, _FVL1_VERSION, nx, ny, nz,
        features.channels, sx, sy, sz, features.stride, _FVL1_DTYPE_F32,
    )
    with open(path, "wb") as f:
        f.write(header)
        for c in range(features.channels):
            f.write(features.data[c].astype("<f4").tobytes(order="F"))


def read_fvl1(path):
    """Read an FVL1 container into a feature volume."""
    from .features import FeatureVolume

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _FVL1_HEADER.size:
        raise TruncatedPayloadError(
            f"{path}: file shorter than the {_FVL1_HEADER.size}-byte header"
        )
    (magic, version, nx, ny, nz, channels,
     sx, sy, sz, stride, dtype_code) = _FVL1_HEADER.unpack_from(raw)
    if magic != _FVL1_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_FVL1_MAGIC!r}")
    if version != _FVL1_VERSION:
        raise VersionError(f"{path}: unsupported FVL1 version {version}")
    if dtype_code != _FVL1_DTYPE_F32:
        raise UnsupportedDatatypeError(f"{path}: unsupported dtype code {dtype_code}")
    if channels < 1 or min(nx, ny, nz) < 1 or stride < 1:
        raise DataError(
            f"{path}: implausible header (dims {(nx, ny, nz)}, "
            f"channels {channels}, stride {stride})"
        )

    count = channels * nx * ny * nz
    payload = raw[_FVL1_HEADER.size:]
    if len(payload) < count * 4:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, need {count * 4}"
        )
    flat = np.frombuffer(payload, dtype="<f4", count=count)
    bad = count - int(np.isfinite(flat).sum())
    if bad:
        raise NonFiniteDataError(f"{path}: payload contains {bad} non-finite values")
    # consecutive channel planes, x varying fastest within each plane
    data = flat.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1)
    geometry = GridGeometry((nx, ny, nz), (sx, sy, sz))
    return FeatureVolume(geometry, np.ascontiguousarray(data), stride=stride)


# ---------------------------------------------------------------------------
# displacement fields ride on FVL1 with three channels

def write_displacement(field: DisplacementField, path) -> None:
    """Write a displacement field as a 3-channel FVL1 file.

    Vector components are in image voxel units; ``stride`` in the header
    distinguishes full-resolution (1) from control-grid fields.
    """
    from .features import FeatureVolume

    fv = FeatureVolume(field.geometry, field.vectors, stride=field.stride)
    write_fvl1(fv, path)


def read_displacement(path) -> DisplacementField:
    """Read a displacement field written by :func:`write_displacement`."""
    fv = read_fvl1(path)
    if fv.channels != 3:
        raise DataError(
            f"{path}: displacement field needs 3 channels, found {fv.channels}"
        )
    resolution = RESOLUTION_FULL if fv.stride == 1 else RESOLUTION_CONTROL
    return DisplacementField(fv.geometry, fv.data, resolution, stride=fv.stride)

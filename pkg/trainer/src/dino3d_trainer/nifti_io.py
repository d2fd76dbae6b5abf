"""Minimal single-file NIfTI-1 reader/writer for 3D scalar volumes.

Standalone on purpose: this package exchanges volumes with the
registration engine through files only, so it carries its own I/O.
Supports .nii and .nii.gz, both byte orders, the common scalar dtypes,
and scl_slope/scl_inter scaling on read. Writes are float32, x-fastest.
"""

import gzip
import struct

import numpy as np

_HDR_SIZE = 348
_MAGIC_OFFSET = 344
_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def _read_raw(path):
    data = open(path, "rb").read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_volume(path):
    """Return (data float32 (nx,ny,nz), spacing (sx,sy,sz))."""
    raw = _read_raw(path)
    if len(raw) < _HDR_SIZE + 4:
        raise ValueError(f"{path}: shorter than a NIfTI-1 header")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != _HDR_SIZE:
            raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr {sizeof_hdr})")
    magic = raw[_MAGIC_OFFSET:_MAGIC_OFFSET + 4]
    if magic != b"n+1\x00":
        raise ValueError(f"{path}: unsupported magic {magic!r}, need single-file n+1")

    dim = struct.unpack_from(f"{order}8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise ValueError(f"{path}: need a 3D volume, got dim {dim[:ndim + 1]}")
    nx, ny, nz = dim[1], dim[2], dim[3]

    (datatype,) = struct.unpack_from(f"{order}h", raw, 70)
    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(f"{order}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    slope, inter = struct.unpack_from(f"{order}2f", raw, 112)

    dt = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = nx * ny * nz
    start = int(vox_offset)
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=start)
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        data = data * scale + inter
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    return np.ascontiguousarray(data), spacing


def write_volume(data, path, spacing=(1.0, 1.0, 1.0)):
    """Write a float32 3D array as single-file NIfTI-1."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"need a 3D array, got shape {arr.shape}")

    hdr = bytearray(_HDR_SIZE + 4)  # header + 4-byte extension flag
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(_HDR_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[_MAGIC_OFFSET:_MAGIC_OFFSET + 4] = b"n+1\x00"

    payload = arr.astype("<f4").tobytes(order="F")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(payload)

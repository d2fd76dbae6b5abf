"""FVL1 feature-container writer/reader.

The layout matches the registration engine's interchange format exactly:
a 44-byte little-endian header — magic ``FVL1``, version (u32),
dims (3 x u32), channels (u32), spacing (3 x f32), stride (u32), dtype
code (u8, 0 = float32), 3 pad bytes — then one float32 plane per channel
in x-fastest (Fortran) order.
"""

import struct

import numpy as np

_HEADER = struct.Struct("<4sI3II3fIB3x")
_MAGIC = b"FVL1"
_VERSION = 1
_DTYPE_F32 = 0


def write_features(data, stride, path, spacing=(1.0, 1.0, 1.0)):
    """Write a (channels, nx, ny, nz) float32 array with its token stride."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"need a (channels, nx, ny, nz) array, got shape {arr.shape}")
    channels, nx, ny, nz = arr.shape
    header = _HEADER.pack(
        _MAGIC, _VERSION, nx, ny, nz, channels,
        spacing[0], spacing[1], spacing[2], int(stride), _DTYPE_F32,
    )
    with open(path, "wb") as f:
        f.write(header)
        for c in range(channels):
            f.write(arr[c].astype("<f4").tobytes(order="F"))


def read_features(path):
    """Return (data (channels, nx, ny, nz) float32, stride, spacing)."""
    raw = open(path, "rb").read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: shorter than the {_HEADER.size}-byte header")
    (magic, version, nx, ny, nz, channels,
     sx, sy, sz, stride, dtype_code) = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION or dtype_code != _DTYPE_F32:
        raise ValueError(f"{path}: unsupported version/dtype ({version}, {dtype_code})")
    count = channels * nx * ny * nz
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    data = flat.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1)
    return np.ascontiguousarray(data), int(stride), (sx, sy, sz)

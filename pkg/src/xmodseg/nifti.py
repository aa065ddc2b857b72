"""Minimal single-file NIfTI-1 reader and writer.

Covers exactly what this package needs: scalar 3D payloads, ``.nii`` and
``.nii.gz``, and a 4x4 affine taken from the sform (or decoded from the
qform quaternion when only that is present). Detached ``.hdr``/``.img``
pairs and exotic datatypes are rejected with a named error.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class HeaderError(ValueError):
    """File is not a readable NIfTI-1 image (bad magic, size, or fields)."""


class NonVolumetricError(ValueError):
    """Payload is not a 3D volume."""


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _affine_from_quaternion(hdr: bytes, order: str) -> np.ndarray:
    b, c, d = struct.unpack(order + "3f", hdr[256:268])
    offsets = struct.unpack(order + "3f", hdr[268:280])
    pixdim = struct.unpack(order + "8f", hdr[76:108])
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a_sq) if a_sq > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    scale = np.diag([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot @ scale
    affine[:3, 3] = offsets
    return affine


def read(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a 3D NIfTI-1 file.

    Returns ``(data, affine)`` where ``data`` has the on-disk dtype and
    index order (i, j, k), and ``affine`` maps voxel indices to RAS+ mm.

    Raises FileNotFoundError, HeaderError, or NonVolumetricError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise HeaderError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = raw[:HEADER_SIZE]

    (sizeof_hdr,) = struct.unpack("<i", hdr[:4])
    if sizeof_hdr == HEADER_SIZE:
        order = "<"
    elif struct.unpack(">i", hdr[:4])[0] == HEADER_SIZE:
        order = ">"
    else:
        raise HeaderError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = hdr[344:348]
    if magic != MAGIC:
        raise HeaderError(f"{path}: unsupported magic {magic!r} (need single-file 'n+1')")

    dim = struct.unpack(order + "8h", hdr[40:56])
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise NonVolumetricError(f"{path}: not a 3D volume (ndim={ndim})")
    if any(n > 1 for n in dim[4 : 1 + ndim]):
        raise NonVolumetricError(f"{path}: not a 3D volume (shape {dim[1:1 + ndim]})")
    shape = tuple(int(n) for n in dim[1:4])
    if any(n < 1 for n in shape):
        raise HeaderError(f"{path}: non-positive dimension in {shape}")

    datatype, bitpix = struct.unpack(order + "2h", hdr[70:74])
    if datatype not in _DTYPES:
        raise HeaderError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    if bitpix != dtype.itemsize * 8:
        raise HeaderError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    (vox_offset,) = struct.unpack(order + "f", hdr[108:112])
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise HeaderError(f"{path}: vox_offset {vox_offset} is inside the header")
    scl_slope, scl_inter = struct.unpack(order + "2f", hdr[112:120])

    qform_code, sform_code = struct.unpack(order + "2h", hdr[252:256])
    if sform_code > 0:
        rows = struct.unpack(order + "12f", hdr[280:328])
        affine = np.eye(4)
        affine[0, :] = rows[0:4]
        affine[1, :] = rows[4:8]
        affine[2, :] = rows[8:12]
    elif qform_code > 0:
        affine = _affine_from_quaternion(hdr, order)
    else:
        raise HeaderError(f"{path}: header carries no affine (sform and qform absent)")

    count = int(np.prod(shape))
    body = raw[offset : offset + count * dtype.itemsize]
    if len(body) < count * dtype.itemsize:
        raise HeaderError(f"{path}: truncated payload")
    data = np.frombuffer(body, dtype=dtype).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return data, affine


def write(path: str | Path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write a 3D array to a single-file NIfTI-1 image.

    The array dtype is written as-is (must be one of the supported codes);
    gzip compression is chosen by the ``.gz`` suffix.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NonVolumetricError(f"can only write 3D volumes, got shape {data.shape}")
    if data.dtype not in _CODES:
        raise HeaderError(f"unsupported dtype for NIfTI output: {data.dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 2 | 8)  # units: mm, sec
    descrip = b"xmodseg"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform unused, sform aligned
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    hdr[344:348] = MAGIC

    payload = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        with gzip.open(path, "wb", compresslevel=4) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)

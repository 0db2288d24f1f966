"""Minimal NIfTI-1 single-file codec.

Reads and writes the 348-byte NIfTI-1 header plus raw voxel payload,
little-endian only. Supported datatypes: uint8 (2), int16 (4), float32 (16).
Gzip containers are detected by magic bytes on read and selected by a
``.gz`` suffix on write (with mtime pinned to 0 so outputs are
byte-reproducible).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# little-endian NIfTI-1 header layout
_HDR_FMT = "<i10s18sihbb8h3fhhhh8ffffhbbffffii80s24shh6f12f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE

_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_DTYPE_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(pixdim, quats):
    """Affine from the qform quaternion fields (method 2 of the standard)."""
    b, c, d, ox, oy, oz = quats
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = (ox, oy, oz)
    return affine


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Read a NIfTI-1 file.

    Returns (data, spacing, affine) where data is a float32 array of shape
    (W, H, D) with any scl_slope/scl_inter scaling applied, spacing is the
    per-axis voxel size in mm, and affine maps voxel indices to world mm.
    """
    path = Path(path)
    try:
        raw = _read_bytes(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    fields = struct.unpack(_HDR_FMT, raw[:HEADER_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        if sizeof_hdr == 1543569408:  # byte-swapped 348
            raise FormatError(f"{path}: big-endian NIfTI is not supported")
        raise FormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = fields[-1]
    if magic == MAGIC_PAIR:
        raise FormatError(f"{path}: .hdr/.img pairs are not supported")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"{path}: bad magic {magic!r}")

    dim = fields[7:15]
    if dim[0] != 3:
        raise FormatError(f"{path}: non-3D image ({dim[0]}-D)")
    shape = (int(dim[1]), int(dim[2]), int(dim[3]))
    if min(shape) < 1:
        raise FormatError(f"{path}: degenerate dimensions {shape}")

    datatype = fields[19]
    if datatype not in _DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder("<")

    pixdim = fields[22:30]
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise FormatError(f"{path}: non-positive pixdim {spacing}")

    vox_offset = int(fields[30])
    scl_slope = float(fields[31])
    scl_inter = float(fields[32])
    qform_code = fields[44]
    sform_code = fields[45]
    quats = fields[46:52]
    srow = fields[52:64]

    if sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        affine = _quaternion_affine(pixdim, quats)
    else:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    count = shape[0] * shape[1] * shape[2]
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload ({len(raw)} < {need} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = flat.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * np.float32(slope) + np.float32(scl_inter)
    return data, spacing, affine


def write_nifti(
    path: str | Path,
    data: np.ndarray,
    spacing: tuple[float, float, float],
    affine: np.ndarray,
) -> None:
    """Write a 3D array as a NIfTI-1 single file.

    uint8 arrays are stored with datatype 2, everything else as float32
    (datatype 16). The affine is stored in the sform (code 1).
    """
    path = Path(path)
    if data.ndim != 3:
        raise FormatError(f"only 3D arrays can be written, got {data.ndim}-D")
    if data.dtype == np.uint8:
        payload = np.ascontiguousarray(data)
    else:
        payload = np.ascontiguousarray(data.astype(np.float32, copy=False))
    code = _DTYPE_CODES[payload.dtype]
    bitpix = payload.dtype.itemsize * 8

    dim = [3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1]
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]
    srow = list(affine[0, :]) + list(affine[1, :]) + list(affine[2, :])
    header = struct.pack(
        _HDR_FMT,
        HEADER_SIZE,
        b"",
        b"",
        0,
        0,
        0,  # regular
        0,  # dim_info
        *dim,
        0.0,
        0.0,
        0.0,
        0,  # intent_code
        code,
        bitpix,
        0,  # slice_start
        *pixdim,
        352.0,  # vox_offset
        1.0,  # scl_slope
        0.0,  # scl_inter
        0,
        0,
        2,  # xyzt_units: mm
        0.0,
        0.0,
        0.0,
        0.0,
        0,
        0,
        b"cordseg",
        b"",
        0,  # qform_code
        1,  # sform_code
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        *srow,
        b"",
        MAGIC_SINGLE,
    )
    blob = header + b"\x00" * 4 + payload.tobytes(order="F")
    try:
        if path.suffix == ".gz":
            with open(path, "wb") as fh:
                # blank filename + zero mtime keep the bytes reproducible
                with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                    gz.write(blob)
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc

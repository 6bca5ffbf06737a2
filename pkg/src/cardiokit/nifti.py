"""Minimal NIfTI-1 reader/writer covering the subset this package needs.

Supported: single-file .nii (magic ``n+1\\0``) and header-style magic
``ni1\\0`` with the data block in the same byte stream; datatypes uint8,
int16, float32; 3D or 4D volumes; optional gzip compression (detected by
signature).  Data on disk is x-fastest, matching the package-wide index
order.  Files are written little-endian; both byte orders are accepted on
read (detected from sizeof_hdr).
"""
from __future__ import annotations

import gzip
import math
import struct

import numpy as np

from .volume import LabelVolume, VoxelSpacing, Volume4D

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

_DTYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}
_CODE_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_BITPIX = {2: 8, 4: 16, 16: 32}


class NiftiError(Exception):
    """Base class for all NIfTI parse/emit failures."""


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class NonPositiveSpacing(NiftiError):
    pass


class ValueOutOfRange(NiftiError):
    pass


class NonFiniteData(NiftiError):
    pass


class HeaderError(NiftiError):
    pass


class BadGzip(NiftiError):
    pass


def _decompress_if_gzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(data)
        except Exception as exc:  # zlib raises several concrete types
            raise BadGzip(f"corrupt gzip stream: {exc}") from None
    return data


def read_nifti(data: bytes) -> Volume4D:
    """Parse NIfTI-1 bytes into a Volume4D (T=1 for 3D files).

    Applies scl_slope/scl_inter rescaling when scl_slope is nonzero and
    finite; spacing comes from pixdim[1..4].  Raises a NiftiError subclass
    on any malformed input, never a bare exception.
    """
    data = _decompress_if_gzip(data)
    if len(data) < HEADER_SIZE:
        raise TruncatedData(f"file shorter than the {HEADER_SIZE}-byte header")

    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"magic {magic!r} is not a NIfTI-1 signature")

    if struct.unpack_from("<i", data, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order")

    dim = struct.unpack_from(bo + "8h", data, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise HeaderError(f"dim[0] must be 3 or 4, got {ndim}")
    dims = list(dim[1 : 1 + ndim])
    if any(d < 1 for d in dims):
        raise HeaderError(f"non-positive dims {dims}")

    datatype, bitpix = struct.unpack_from(bo + "2h", data, 70)
    if datatype not in _CODE_DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not in {sorted(_CODE_DTYPES)}")
    if bitpix != _CODE_BITPIX[datatype]:
        raise HeaderError(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = struct.unpack_from(bo + "8f", data, 76)
    dx, dy, dz = pixdim[1], pixdim[2], pixdim[3]
    if not all(math.isfinite(p) and p > 0 for p in (dx, dy, dz)):
        raise NonPositiveSpacing(f"pixdim[1..3] must be positive, got {(dx, dy, dz)}")
    dt = pixdim[4] if ndim == 4 and math.isfinite(pixdim[4]) and pixdim[4] > 0 else 0.0

    vox_offset, scl_slope, scl_inter = struct.unpack_from(bo + "3f", data, 108)
    if not math.isfinite(vox_offset):
        raise HeaderError("non-finite vox_offset")
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else DEFAULT_VOX_OFFSET

    qform_code, sform_code = struct.unpack_from(bo + "2h", data, 252)
    if qform_code < 0 or sform_code < 0:
        raise HeaderError("negative qform/sform code")

    np_dtype = np.dtype(_CODE_DTYPES[datatype]).newbyteorder(bo)
    nvox = 1
    for d in dims:
        nvox *= d
    nbytes = nvox * np_dtype.itemsize
    if len(data) < offset + nbytes:
        raise TruncatedData(
            f"data block needs {nbytes} bytes at offset {offset}, file has {len(data)}"
        )

    raw = np.frombuffer(data, dtype=np_dtype, count=nvox, offset=offset)
    values = raw.astype(np.float32)
    if math.isfinite(scl_slope) and math.isfinite(scl_inter) and scl_slope != 0.0:
        with np.errstate(over="ignore", invalid="ignore"):
            values = values * np.float32(scl_slope) + np.float32(scl_inter)
    if not np.all(np.isfinite(values)):
        raise NonFiniteData("volume contains non-finite values after rescaling")

    if ndim == 3:
        dims = dims + [1]
    arr = values.reshape(dims, order="F")
    return Volume4D(arr, VoxelSpacing(float(dx), float(dy), float(dz), float(dt)))


def _check_representable(arr: np.ndarray, dtype: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueOutOfRange("non-finite values cannot be written")
    if dtype == "uint8":
        lo, hi = 0, 255
    elif dtype == "int16":
        lo, hi = -32768, 32767
    else:  # float32
        finfo = np.finfo(np.float32)
        if np.any(np.abs(arr) > finfo.max):
            raise ValueOutOfRange("values exceed float32 range")
        return arr.astype(np.float32)
    if np.any(arr != np.round(arr)):
        raise ValueOutOfRange(f"non-integer values cannot be written as {dtype}")
    if arr.min() < lo or arr.max() > hi:
        raise ValueOutOfRange(f"values outside [{lo}, {hi}] for {dtype}")
    return arr.astype(_CODE_DTYPES[_DTYPE_CODES[dtype]])


def write_nifti(v: Volume4D | LabelVolume, dtype: str | None = None) -> bytes:
    """Serialize a volume to NIfTI-1 bytes (little-endian, vox_offset 352).

    ``dtype`` is one of uint8/int16/float32; defaults to uint8 for label
    volumes and float32 for image volumes.  read_nifti(write_nifti(v))
    reproduces dims, spacing, and data exactly for lossless dtypes.
    """
    if isinstance(v, LabelVolume):
        arr, spacing = v.labels, v.spacing
        dtype = dtype or "uint8"
    else:
        arr, spacing = v.data, v.spacing
        dtype = dtype or "float32"
    if dtype not in _DTYPE_CODES:
        raise UnsupportedDatatype(f"dtype {dtype!r} not in {sorted(_DTYPE_CODES)}")

    out = _check_representable(np.asarray(arr), dtype)
    ndim = out.ndim
    dims = [0] * 8
    dims[0] = ndim
    dims[1 : 1 + ndim] = out.shape

    pixdim = [0.0] * 8
    pixdim[1:5] = [spacing.dx, spacing.dy, spacing.dz, spacing.dt]

    code = _DTYPE_CODES[dtype]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<2h", hdr, 70, code, _CODE_BITPIX[code])
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(DEFAULT_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 2 | 8)  # xyzt units: mm, sec
    struct.pack_into("<9s", hdr, 148, b"cardiokit")
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    le = out.astype(out.dtype.newbyteorder("<"), copy=False)
    body = le.reshape(-1, order="F").tobytes()
    return bytes(hdr) + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + body


def write_nifti_gz(v: Volume4D | LabelVolume, dtype: str | None = None) -> bytes:
    return gzip.compress(write_nifti(v, dtype), mtime=0)

"""Versioned binary container for model artifacts.

Layout (all integers little-endian):

    bytes 0..3    magic (4 ASCII bytes, artifact kind)
    bytes 4..7    format version, uint32
    bytes 8..15   header length H, uint64
    bytes 16..    header: UTF-8 JSON of {"meta": ..., "arrays": [...]}
    16+H..        payload: raw array bytes at the offsets named in the header

Each header array entry is {"name", "dtype", "shape", "offset", "nbytes"};
dtype is a little-endian numpy dtype string from a fixed allow-list.  The
payload length must equal the sum of the declared array sizes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

_ALLOWED_DTYPES = ("<f4", "<f8", "<i8", "<i4", "|u1")


class VersionMismatch(Exception):
    pass


class CorruptBundle(Exception):
    pass


def pack_container(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        dstr = dtype.str if dtype.str in _ALLOWED_DTYPES else None
        if dstr is None:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dstr,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")
    return b"".join(
        [magic, struct.pack("<I", version), struct.pack("<Q", len(header)), header] + blobs
    )


def unpack_container(data: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container, checking magic and version; returns (meta, arrays)."""
    if len(data) < 16:
        raise CorruptBundle("container shorter than its fixed header")
    if data[:4] != magic:
        raise CorruptBundle(f"bad magic {data[:4]!r}, expected {magic!r}")
    (got_version,) = struct.unpack("<I", data[4:8])
    if got_version != version:
        raise VersionMismatch(f"format version {got_version}, reader supports {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptBundle("declared header overruns the container")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptBundle(f"unreadable header: {e}") from None
    if not isinstance(header, dict) or "meta" not in header or "arrays" not in header:
        raise CorruptBundle("header missing required keys")
    payload = data[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    total = 0
    for entry in header["arrays"]:
        try:
            name, dstr = entry["name"], entry["dtype"]
            shape, offset, nbytes = tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        except (KeyError, TypeError) as e:
            raise CorruptBundle(f"malformed array entry: {e}") from None
        if dstr not in _ALLOWED_DTYPES:
            raise CorruptBundle(f"array {name!r} has disallowed dtype {dstr!r}")
        dtype = np.dtype(dstr)
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != nbytes:
            raise CorruptBundle(f"array {name!r} shape does not match its byte count")
        if offset < 0 or offset + nbytes > len(payload):
            raise CorruptBundle(f"array {name!r} overruns the payload")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=offset).reshape(shape).copy()
        total += nbytes
    if total != len(payload):
        raise CorruptBundle("payload length does not match the declared arrays")
    return header["meta"], arrays

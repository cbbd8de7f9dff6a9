"""Bit-exact tensor container files.

Layout: magic b"SFCT", a little-endian u32 header length, a UTF-8 JSON
header, then the raw payload. The header records a schema version, an
optional metadata document, and one entry per tensor (name, dtype, shape,
byte offset into the payload). Payload bytes are little-endian row-major;
offsets ascend without overlap, and read(write(x)) is bitwise identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SFCT"
SCHEMA_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype_name} for entry {name!r}")
        blob = np.ascontiguousarray(arr.astype(_DTYPES[dtype_name], copy=False)).tobytes()
        entries.append(
            {"name": name, "dtype": dtype_name, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "schema": SCHEMA_VERSION,
        "meta": meta or {},
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema {header.get('schema')}")
        payload = fh.read()
    entries = header["entries"]
    last_end = 0
    arrays: dict[str, np.ndarray] = {}
    for e in entries:
        if e["offset"] < last_end:
            raise ValueError(f"{path}: overlapping or unordered entry {e['name']!r}")
        dt = np.dtype(_DTYPES[e["dtype"]])
        size = dt.itemsize * int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else dt.itemsize
        end = e["offset"] + size
        if end > len(payload):
            raise ValueError(f"{path}: entry {e['name']!r} runs past the payload")
        buf = payload[e["offset"]: end]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(e["dtype"])
        last_end = end
    if last_end != len(payload):
        raise ValueError(f"{path}: payload length {len(payload)} != entries total {last_end}")
    return header["meta"], arrays

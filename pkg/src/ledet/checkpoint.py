"""Versioned checkpoint container with byte-stable round-trips.

Layout: 8-byte magic, u32 format version, u64 header length, a UTF-8 JSON
header with sorted keys (parameter name/shape/dtype/offset table plus free-form
metadata), then the concatenated little-endian parameter bytes. No pickle, no
archive timestamps: saving a loaded checkpoint reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEDETCK\x00"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """Write named arrays plus JSON-serializable metadata."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "metadata": metadata}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, metadata); inverse of save_checkpoint."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).astype(e["dtype"])
        arrays[e["name"]] = arr
    return arrays, header["metadata"]

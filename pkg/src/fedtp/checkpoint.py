"""Named-array checkpoint files.

Layout: the 8-byte magic ``FEDTPNA1``, a little-endian uint64 header length,
a UTF-8 JSON header, then each array's little-endian bytes back to back. The
header lists ``name``, ``shape``, ``dtype`` and ``offset`` for every array
plus an arbitrary ``config`` echo.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FEDTPNA1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], config: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "config": config or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a named-array checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: array {e['name']!r} truncated")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dtype).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
    return arrays, header["config"]

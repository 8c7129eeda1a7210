"""Self-describing tensor files.

Layout::

    b"PIDSTENSOR1\\n"
    8-byte little-endian unsigned header length
    header: UTF-8 JSON, sorted keys
        {"metadata": {...}, "tensors": [{"name", "shape", "dtype": "<f8", "offset"}, ...]}
    raw little-endian float64 data, tensors in header order

No timestamps or platform fields are written, so equal inputs give
byte-identical files.
"""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PIDSTENSOR1\n"
DTYPE = "<f8"


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE, "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not a tensor file")
    pos = len(MAGIC)
    (header_len,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    base = pos + header_len
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=entry["dtype"], count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return tensors, header["metadata"]

"""Binary weight files.

Layout: 8-byte magic ``OSEGW001``, an unsigned little-endian 64-bit length,
that many bytes of UTF-8 JSON (a list of ``{"name", "shape", "offset"}``
entries, offsets relative to the payload start), then the raw little-endian
float64 payloads back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OSEGW001"


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(table, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ValueError(f"not a weight file (magic {blob[:8]!r})")
    (n,) = struct.unpack("<Q", blob[8:16])
    table = json.loads(blob[16:16 + n].decode("utf-8"))
    payload = memoryview(blob)[16 + n:]
    out = {}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise ValueError(f"weight file truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8").reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return out


def save_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

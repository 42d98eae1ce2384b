"""Single-file tensor container used for checkpoints and BN-stat overlays.

Layout: 5-byte magic "DSEG1", a little-endian uint64 header length, a
UTF-8 JSON header listing {name, dtype, shape, byte_offset, byte_length}
per tensor plus free-form metadata, then one contiguous little-endian
IEEE payload. Offsets are relative to the payload start. Written bytes
are a pure function of (tensors, meta).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"DSEG1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "byte_offset": offset,
                        "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header)).newbyteorder("<").tobytes())
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a DSEG1 container")
    hlen = int(np.frombuffer(blob[5:13], dtype="<u8")[0])
    header = json.loads(blob[13:13 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported container version")
    payload = blob[13 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = payload[e["byte_offset"]:e["byte_offset"] + e["byte_length"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
    return tensors, header.get("meta", {})

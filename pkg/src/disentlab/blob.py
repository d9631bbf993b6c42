"""
Binary container: magic, little-endian u64 header length, JSON header, raw arrays.

The header lists every array's name, dtype, shape and byte offset relative
to the end of the header, so files round-trip bit-exactly.
"""

import json
import struct

import numpy as np

MAGIC = b"DLBLOB01"


def write_blob(path: str, header: dict, arrays: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(dict(header, arrays=entries), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_blob(path: str):
    """Return ``(header, arrays)``; ``arrays`` preserves write order."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a blob file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        body = fh.read()
    arrays = {}
    for e in header.pop("arrays"):
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays

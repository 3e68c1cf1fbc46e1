"""Binary tensor files: fixed header, JSON table, little-endian float32 payload.

Layout::

    magic      8 bytes
    version    uint32 LE
    hdr_len    uint32 LE
    header     hdr_len bytes of UTF-8 JSON: {"meta": ..., "tensors": [{name, shape, offset}]}
    payload    concatenated row-major float32 LE arrays; offsets are in bytes
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import StructuralError

VERSION = 1
F32 = np.dtype("<f4")


def write_tensor_file(path, magic, meta, tensors):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=F32))
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)
    return path


def read_tensor_file(path, magic):
    path = Path(path)
    if not path.exists():
        raise StructuralError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != magic:
        raise StructuralError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise StructuralError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    payload = raw[16 + hlen :]
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        start = t["offset"]
        if start + 4 * n > len(payload):
            raise StructuralError(f"{path}: tensor {t['name']} runs past end of payload")
        tensors[t["name"]] = np.frombuffer(payload, dtype=F32, count=n, offset=start).reshape(t["shape"]).copy()
    return header["meta"], tensors


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Single-file tensor container.

Layout: 8-byte magic ``MDECKPT1``, little-endian uint64 header length, UTF-8 JSON
header, then the tensors as contiguous little-endian float32 blobs in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .core import MDEError

MAGIC = b"MDECKPT1"


def write_blobs(path: str | Path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    index = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(header, tensors=index)
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_blobs(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise MDEError(f"{path}: not a checkpoint container")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors

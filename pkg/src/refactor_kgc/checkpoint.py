"""Checkpoint files: a JSON header followed by raw little-endian arrays.

Layout::

    KGCKPT <version> <header-bytes>\\n
    <header JSON, utf-8>
    <array 0 bytes><array 1 bytes>...

The header's ``arrays`` entry lists name, shape and dtype of each payload
array in order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = "KGCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray], f32: bool = False) -> None:
    """Write ``arrays`` in insertion order. ``f32`` down-casts float payloads."""
    dtype = "<f4" if f32 else "<f8"
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=dtype)
        specs.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = dict(header, format_version=FORMAT_VERSION, arrays=specs)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} {len(head)}\n".encode("ascii"))
        fh.write(head)
        fh.writelines(blobs)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(first[1]) != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {first[1]}")
        head = json.loads(fh.read(int(first[2])).decode("utf-8"))
        return head, fh.tell()


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    header, offset = read_header(path)
    data = Path(path).read_bytes()[offset:]
    expected = sum(int(np.prod(a["shape"], dtype=np.int64)) * np.dtype(a["dtype"]).itemsize for a in header["arrays"])
    if len(data) != expected:
        raise CheckpointError(f"{path}: payload has {len(data)} bytes, header declares {expected}")
    arrays, pos = {}, 0
    for a in header["arrays"]:
        dt = np.dtype(a["dtype"])
        n = int(np.prod(a["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(a["shape"])
        arrays[a["name"]] = arr.astype(np.float64)
        pos += n * dt.itemsize
    return header, arrays

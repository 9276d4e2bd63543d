"""Single-file checkpoint container.

A checkpoint is a JSON header describing an arbitrarily nested payload plus
a sequence of raw array blobs. The encoding is deliberately boring: writing
the same payload twice produces identical bytes, which lets tests assert
save -> load -> save byte-identity, and a version field up front gives
explicit errors instead of garbage when formats drift.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, List, Tuple

import numpy as np
import torch

MAGIC = b"DIFFACKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode(obj: Any, blobs: List[bytes]) -> Any:
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().numpy()
        return _blob_ref(arr, blobs, torch_tensor=True)
    if isinstance(obj, np.ndarray):
        return _blob_ref(obj, blobs, torch_tensor=False)
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _encode(v, blobs) for k, v in obj.items()}
        if all(isinstance(k, (int, np.integer)) for k in obj):
            return {"__intdict__": {str(int(k)): _encode(v, blobs) for k, v in obj.items()}}
        raise CheckpointError(f"unsupported dict key types: {set(type(k) for k in obj)}")
    raise CheckpointError(f"cannot serialize object of type {type(obj)!r}")


def _blob_ref(arr: np.ndarray, blobs: List[bytes], torch_tensor: bool) -> dict:
    arr = np.ascontiguousarray(arr)
    blobs.append(arr.tobytes())
    return {
        "__array__": len(blobs) - 1,
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "torch": torch_tensor,
    }


def _decode(obj: Any, blobs: List[bytes]) -> Any:
    if isinstance(obj, dict):
        if "__array__" in obj:
            arr = np.frombuffer(blobs[obj["__array__"]], dtype=np.dtype(obj["dtype"]))
            arr = arr.reshape(obj["shape"]).copy()
            if obj["torch"]:
                return torch.from_numpy(arr)
            return arr
        if "__tuple__" in obj:
            return tuple(_decode(v, blobs) for v in obj["__tuple__"])
        if "__intdict__" in obj:
            return {int(k): _decode(v, blobs) for k, v in obj["__intdict__"].items()}
        return {k: _decode(v, blobs) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    return obj


def save_checkpoint(path, payload: dict) -> None:
    """Atomically write the payload to path."""
    path = Path(path)
    blobs: List[bytes] = []
    header = json.dumps(_encode(payload, blobs), separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Read a checkpoint, failing loudly on version or truncation problems."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint: missing {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: expected {FORMAT_VERSION}, found {version}"
        )
    (header_len,) = struct.unpack("<Q", take(8, "header length"))
    header = json.loads(take(header_len, "header").decode("utf-8"))
    (n_blobs,) = struct.unpack("<I", take(4, "blob count"))
    blobs: List[bytes] = []
    for i in range(n_blobs):
        (blob_len,) = struct.unpack("<Q", take(8, f"blob {i} length"))
        blobs.append(take(blob_len, f"blob {i}"))
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return _decode(header, blobs)

"""DTZ tensor files and checkpoint directories.

Layout of a ``.dtz`` file: magic ``DTEN``, version byte (1), dtype byte
(1 = float64), rank byte, ``rank`` little-endian uint32 extents, then the
row-major little-endian payload.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Mapping, Optional, Union

import numpy as np

MAGIC = b"DTEN"
VERSION = 1
DTYPE_F64 = 1


class DTZError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise DTZError("rank above 255 cannot be encoded")
    header = MAGIC + bytes([VERSION, DTYPE_F64, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise DTZError("missing DTEN magic")
    version, dtype, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise DTZError(f"unsupported DTZ version {version}")
    if dtype != DTYPE_F64:
        raise DTZError(f"unsupported dtype code {dtype}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise DTZError(f"truncated header: need {off} bytes, got {len(buf)}")
    shape = struct.unpack(f"<{rank}I", buf[7:off])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * count:
        raise DTZError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)


def save(path: Union[str, os.PathLike], arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(np.asarray(arr)))


def load(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_checkpoint(
    directory: Union[str, os.PathLike],
    tensors: Mapping[str, np.ndarray],
    manifest: Optional[dict] = None,
) -> None:
    """Write one ``{name}.dtz`` per tensor plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    for name, arr in tensors.items():
        save(os.path.join(directory, f"{name}.dtz"), arr)
    meta = dict(manifest or {})
    meta["tensors"] = sorted(tensors)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(directory: Union[str, os.PathLike]):
    """Return ``(tensors, manifest)`` for a checkpoint directory."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    tensors: Dict[str, np.ndarray] = {}
    for name in manifest.get("tensors", []):
        tensors[name] = load(os.path.join(directory, f"{name}.dtz"))
    return tensors, manifest

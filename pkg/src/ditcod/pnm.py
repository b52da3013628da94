"""Binary 8-bit PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]


class PNMError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError(f"unexpected end of header at byte {pos}")
    return buf[start:pos], pos


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes to floats in [0,1]: ``(1,H,W)`` or ``(3,H,W)``."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r} at byte 0")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PNMError(f"malformed header field {tok!r} at byte {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise PNMError(f"only 8-bit images are supported, maxval {maxval} at byte {pos}")
    if width < 1 or height < 1:
        raise PNMError(f"invalid size {width}x{height}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PNMError(f"missing whitespace after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    actual = len(buf) - pos
    if actual < expected:
        raise PNMError(f"truncated payload at byte {pos}: expected {expected} bytes, got {actual}")
    data = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    return data.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode(img: np.ndarray) -> bytes:
    """Quantise ``(1,H,W)``, ``(3,H,W)`` or ``(H,W)`` values in [0,1] to 8 bits."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise PNMError(f"cannot encode array of shape {arr.shape}")
    c, h, w = arr.shape
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def load_image(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode(buf)
    except PNMError as exc:
        raise PNMError(f"{path}: {exc}") from None


def save_image(path: PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))

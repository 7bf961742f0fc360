"""Binary PGM (P5, maxval 255) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a uint8 HxW array. Floats are taken as [0,1] and scaled."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w = arr.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _tokens(data: bytes):
    """Yield (token, end_offset) for header fields, skipping comments."""
    pos = 0
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
                pos += 1
            yield data[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a uint8 HxW array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    fields = []
    for tok, end in _tokens(data):
        fields.append(tok)
        if len(fields) == 4:
            break
    if len(fields) < 4 or fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates the header from the raster
    raster = data[end + 1 : end + 1 + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()

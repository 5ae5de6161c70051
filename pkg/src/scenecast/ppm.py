"""Binary PPM (P6) / PGM (P5) image IO, maxval 255.

These formats are byte-exact and dependency-free, which lets tests assert
on rendered output at the byte level. All writes are atomic (temp file +
rename).
"""

from __future__ import annotations

import os
import tempfile

import numpy as np


def _atomic_write_bytes(path, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(data: bytes, magic: bytes):
    # Netpbm header: magic, width, height, maxval, separated by whitespace;
    # '#' starts a comment running to end of line.
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    return fields, pos


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM and return float64 HxWx3 with channels in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    (width, height, maxval), pos = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} (expected 255)")
    need = width * height * 3
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    if raw.size != need:
        raise ValueError("truncated pixel data")
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write HxWx3 uint8 (or float in [0,1]) as binary P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, c = arr.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    header = f"P6\n{w} {h}\n255\n".encode()
    _atomic_write_bytes(path, header + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM and return the uint8 HxW array."""
    with open(path, "rb") as f:
        data = f.read()
    (width, height, maxval), pos = _read_header(data, b"P5")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} (expected 255)")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if raw.size != width * height:
        raise ValueError("truncated pixel data")
    return raw.reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write HxW uint8 as binary P5."""
    arr = np.asarray(image, dtype=np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    _atomic_write_bytes(path, header + arr.tobytes())

"""8-bit image I/O (PNG via Pillow, binary PPM by hand) with atomic writes.

PPM (P6, maxval 255) is the byte-exact golden-file format for tests; PNG is
the everyday format. All writes go through a temp file plus rename so an
interrupted run never leaves a truncated artifact.
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

MAX_SIDE = 4096


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename within the destination directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_sides(h: int, w: int, path) -> None:
    if h < 1 or w < 1 or h > MAX_SIDE or w > MAX_SIDE:
        raise InputError(f"{path}: image size {w}x{h} outside supported range (1..{MAX_SIDE})")


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM into a float64 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"{path}: cannot decode image ({exc})") from exc
    _check_sides(arr.shape[0], arr.shape[1], path)
    return arr.astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    """Write a float [0, 1] (H, W, 3) array as PNG or PPM depending on suffix."""
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) image data, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
        atomic_write_bytes(path, header + data.tobytes())
        return
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    i = 0
    # Header = 4 whitespace-separated fields; '#' starts a comment to EOL.
    while len(fields) < 4 and i < len(blob):
        ch = blob[i : i + 1]
        if ch in b" \t\r\n":
            i += 1
        elif ch == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(blob) and blob[j : j + 1] not in b" \t\r\n":
                j += 1
            fields.append(blob[i:j])
            i = j
    if len(fields) < 4 or fields[0] != b"P6":
        raise InputError(f"{path}: not a binary P6 PPM")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise InputError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise InputError(f"{path}: only 8-bit PPM supported, maxval was {maxval}")
    _check_sides(h, w, path)
    i += 1  # single whitespace byte after maxval
    pixels = blob[i : i + w * h * 3]
    if len(pixels) != w * h * 3:
        raise InputError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0

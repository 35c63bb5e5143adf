"""Minimal binary PGM (P5) / PPM (P6) reading and writing, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from xdmmd.errors import FormatError, IoError


def _header(kind: bytes, width: int, height: int) -> bytes:
    return b"%s\n%d %d\n255\n" % (kind, width, height)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(_header(b"P5", w, h) + gray.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs an HxWx3 array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(_header(b"P6", w, h) + rgb.tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out: list[bytes] = []
    i = 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated netpbm header")
        out.append(data[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def read_pgm(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    toks, offset = _tokens(data, 4)
    if toks[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    raster = data[offset : offset + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()

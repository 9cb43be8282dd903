"""Binary PPM (P6) and PGM (P5) reading and writing.

Samples wider than 8 bits are stored big-endian, as the Netpbm format requires.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping ``#`` comments."""
    out, pos, n = [], 0, len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        try:
            out.append(int(buf[start:pos]))
        except ValueError:
            raise PNMError(f"non-numeric header field {buf[start:pos]!r}") from None
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Return (H, W) for P5 or (H, W, 3) for P6, as uint8 or big-endian-decoded uint16."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r}")
    (width, height, maxval), pos = _tokens(buf[2:], 3)
    pos += 2
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise PNMError(f"{path}: bad header width={width} height={height} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = buf[pos:pos + expected]
    if len(raster) != expected:
        raise PNMError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def write_pnm(path, image: np.ndarray, maxval: int | None = None) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise PNMError(f"cannot write image of shape {image.shape}")
    if maxval is None:
        maxval = 255 if image.dtype == np.uint8 else 65535
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise PNMError(f"sample values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = image.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    Path(path).write_bytes(header + np.ascontiguousarray(image).astype(dtype).tobytes())

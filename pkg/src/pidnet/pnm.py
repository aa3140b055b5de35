"""Binary PPM/PGM readers and writers.

Images travel as P6 (8-bit RGB), label maps and diagnostic dumps as P5
(8-bit gray). Float images use the [0, 1] range and channel-first layout.
"""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise PnmError(f"expected {magic.decode()} file, got {data[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        fields.append(int(data[start:pos]))
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise PnmError(f"only 8-bit files are supported, maxval {maxval}")
    if width <= 0 or height <= 0:
        raise PnmError(f"bad extent {width}x{height}")
    return width, height, pos


def write_ppm(path, image: np.ndarray) -> None:
    """Write a float image of shape (3, H, W) in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PnmError(f"image must be 3,H,W, got shape {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a float32 image of shape (3, H, W)."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _read_header(data, b"P6")
    body = data[pos:pos + 3 * h * w]
    if len(body) != 3 * h * w:
        raise PnmError(f"pixel payload is {len(body)} bytes, expected {3 * h * w}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an integer map of shape (H, W) with values in [0, 255] as P5."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise PnmError(f"gray map must be H,W, got shape {gray.shape}")
    if gray.min() < 0 or gray.max() > 255:
        raise PnmError("gray values must lie in [0, 255]")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into a uint8 array of shape (H, W)."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _read_header(data, b"P5")
    body = data[pos:pos + h * w]
    if len(body) != h * w:
        raise PnmError(f"pixel payload is {len(body)} bytes, expected {h * w}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm_normalized(path, values: np.ndarray) -> None:
    """Min-max normalize a float map to [0, 255] and write it as P5.
    A constant map writes as all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise PnmError(f"value map must be H,W, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = (values - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(values)
    write_pgm(path, np.rint(scaled).astype(np.uint8))

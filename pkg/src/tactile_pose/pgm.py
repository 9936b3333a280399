"""Binary PGM (P5, 8-bit) read/write for tactile images.

Images are stored with values {0, 255}; in memory they are uint8 {0, 1}.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Malformed or truncated PGM file."""


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a binary {0,1} uint8 image as an 8-bit P5 file (0 -> 0, 1 -> 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected 2-d image, got shape {img.shape}")
    h, w = img.shape
    data = (img.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data)


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 file written by write_pgm back to a {0,1} uint8 array."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    data = raw[m.end():]
    if len(data) < w * h:
        raise PgmError(f"{path}: truncated pixel data ({len(data)} of {w * h} bytes)")
    img = np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)
    return (img >= 128).astype(np.uint8)

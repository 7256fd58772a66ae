"""Grayscale map export: binary PGM (8-bit, min-max scaled) plus raw CSV."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional

import numpy as np

# grey used for a map with no range (max == min)
FLAT_LEVEL = 128


def grid_shape(n: int, width: Optional[int] = None) -> tuple[int, int]:
    """``(rows, cols)`` for laying ``n`` tokens on a grid."""
    if width is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} tokens do not form a square grid; pass a width")
        return side, side
    if width < 1 or n % width:
        raise ValueError(f"{n} tokens cannot be laid out with width {width}")
    return n // width, width


def to_gray(values) -> np.ndarray:
    """Min-max scale to 0..255, rounding half up; a flat map is all 128."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("map contains non-finite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, FLAT_LEVEL, dtype=np.uint8)
    return np.floor(255.0 * (v - lo) / (hi - lo) + 0.5).astype(np.uint8)


def pgm_bytes(values, width: Optional[int] = None) -> bytes:
    v = np.asarray(values).ravel()
    rows, cols = grid_shape(v.size, width)
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + to_gray(v).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary PGM written by :func:`pgm_bytes` into a uint8 grid."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != rows * cols:
        raise ValueError(f"expected {rows * cols} pixels, got {pixels.size}")
    return pixels.reshape(rows, cols)


def export(values, out, width: Optional[int] = None) -> tuple[Path, Path]:
    """Write ``out`` as PGM and a sibling ``.csv`` of the raw values laid out
    on the same grid. Returns both paths."""
    v = np.asarray(values, dtype=np.float64).ravel()
    rows, cols = grid_shape(v.size, width)
    out = Path(out)
    data = pgm_bytes(v, cols)
    csv_path = out.with_suffix(".csv")
    out.write_bytes(data)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in v.reshape(rows, cols):
            writer.writerow(repr(float(x)) for x in row)
    return out, csv_path

"""Plain-text netpbm image I/O (P3 color read/write, P2 gray write).

ASCII formats only: bit-exact, diffable, and free of codec dependencies.
Values are exchanged as floats in [0, 1] on the array side.
"""

import numpy as np

from .errors import FormatError


def _tokens(text):
    for line in text.split("\n"):
        body = line.split("#", 1)[0]
        yield from body.split()


def read_ppm(path):
    """Read a plain P3 image into a (3, H, W) float array in [0, 1]."""
    with open(path, "r", encoding="ascii") as f:
        toks = _tokens(f.read())
    try:
        magic = next(toks)
    except StopIteration:
        raise FormatError(f"{path}: empty file") from None
    if magic != "P3":
        raise FormatError(f"{path}: expected plain PPM magic P3, got "
                          f"{magic!r}")
    try:
        w = int(next(toks))
        h = int(next(toks))
        maxval = int(next(toks))
        vals = [int(next(toks)) for _ in range(3 * w * h)]
    except (StopIteration, ValueError):
        raise FormatError(f"{path}: truncated or malformed pixel data") \
            from None
    if maxval <= 0:
        raise FormatError(f"{path}: nonpositive maxval {maxval}")
    img = np.array(vals, dtype=np.float64).reshape(h, w, 3)
    return img.transpose(2, 0, 1) / maxval


def write_ppm(path, image):
    """Write a (3, H, W) array of [0, 1] floats as plain P3, maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"write_ppm needs (3, H, W), got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(int)
    _, H, W = img.shape
    lines = ["P3", f"{W} {H}", "255"]
    flat = q.transpose(1, 2, 0).reshape(H, -1)
    lines.extend(" ".join(str(v) for v in row) for row in flat)
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def write_pgm(path, channel):
    """Write a (H, W) array as plain P2, min-max normalized to 0..255.

    A constant input has no range to normalize over and maps to all
    zeros.
    """
    arr = np.asarray(channel, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"write_pgm needs (H, W), got {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        q = np.rint((arr - lo) / (hi - lo) * 255).astype(int)
    else:
        q = np.zeros(arr.shape, dtype=int)
    H, W = arr.shape
    lines = ["P2", f"{W} {H}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in q)
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")

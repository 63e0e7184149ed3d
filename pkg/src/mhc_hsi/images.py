"""Binary PGM/PPM writers (and a PGM reader for round-trip checks)."""

import numpy as np

from .exceptions import FormatError

# class palette; index 0 is reserved for unlabeled pixels
PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
], dtype=np.uint8)


def write_pgm(path, image):
    """Write a 2-D integer array as binary PGM (8-bit, or 16-bit big-endian if needed)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 65535):
        raise ValueError("PGM values must lie in [0, 65535]")
    maxval = 255 if not image.size or image.max() <= 255 else 65535
    data = image.astype(np.uint8 if maxval == 255 else ">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM image must be [H, W, 3], got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def colorize(labels):
    """Map class labels (0 = unlabeled) through the fixed palette, cycling past its end."""
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.where(labels == 0, 0, (labels - 1) % (len(PALETTE) - 1) + 1)
    return PALETTE[idx]


def to_gray(values):
    """Min-max scale to 0..255; a constant map becomes mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)

"""Image ingestion (binary PGM/PPM and a raw float dump) and PGM output.

Raw dump layout (little-endian)::

    8 bytes   magic ``b"VPTRRAW1"``
    3 x u32   channels (1 or 3), height, width
    C*H*W f32 intensities in [0, 1], channel-major
"""
import struct

import numpy as np

from .ops import interp_matrix

RAW_MAGIC = b"VPTRRAW1"
TARGET_HEIGHT = 32


class ImageFormatError(ValueError):
    pass


def _pnm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise ImageFormatError(f"bad header token {tok[:16]!r}")
        tokens.append(int(tok))
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(data):
    """Decode binary PGM (P5) or PPM (P6) bytes to ``[H, W, C]`` float64 in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    (w, h, maxval), pos = _pnm_tokens(data, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad header values {w}x{h} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * c
    raster = data[pos:pos + n * dtype.itemsize]
    if len(raster) != n * dtype.itemsize:
        raise ImageFormatError(f"raster truncated: {len(raster)} of {n * dtype.itemsize} bytes")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w, c)
    return arr.astype(np.float64) / maxval


def read_raw(data):
    if len(data) < 20 or data[:8] != RAW_MAGIC:
        raise ImageFormatError("not a raw tensor dump")
    c, h, w = struct.unpack("<3I", data[8:20])
    if c not in (1, 3) or h < 1 or w < 1:
        raise ImageFormatError(f"raw dump has unsupported shape {c}x{h}x{w}")
    n = c * h * w
    body = data[20:]
    if len(body) != 4 * n:
        raise ImageFormatError(f"raw dump body has {len(body)} bytes, expected {4 * n}")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ImageFormatError("raw dump contains non-finite values")
    return arr.transpose(1, 2, 0)


def write_raw(path, chw):
    chw = np.asarray(chw, dtype="<f4")
    if chw.ndim == 2:
        chw = chw[None]
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + struct.pack("<3I", *chw.shape) + chw.tobytes())


def write_pgm(path, gray):
    """Write a 2-D uint8 array as binary PGM."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    g = g.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (g.shape[1], g.shape[0]))
        f.write(g.tobytes())


def write_ppm(path, rgb):
    """Write an ``[H, W, 3]`` uint8 array as binary PPM."""
    a = np.asarray(rgb).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        f.write(a.tobytes())


def preprocess(hwc, height=TARGET_HEIGHT):
    """``[H, W, C]`` intensities in [0, 1] to a network input ``[3, height, W']``.

    Aspect ratio is kept (bilinear), the width is replicate-padded up to a
    multiple of 4, grey is copied to three channels and values go to [-1, 1].
    """
    img = np.asarray(hwc, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, C = img.shape
    if C not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got {C}")
    new_w = max(1, int(round(W * height / H)))
    rh, rw = interp_matrix(H, height), interp_matrix(W, new_w)
    out = np.einsum("ah,hwc,bw->abc", rh, img, rw)
    pad = (-new_w) % 4
    if pad:
        out = np.pad(out, ((0, 0), (0, pad), (0, 0)), mode="edge")
    if C == 1:
        out = np.repeat(out, 3, axis=2)
    out = np.clip(out * 2.0 - 1.0, -1.0, 1.0)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def load_image(path, height=TARGET_HEIGHT):
    """Read PGM/PPM/raw from ``path`` and return the network input ``[3, height, W]``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] == RAW_MAGIC:
        return preprocess(read_raw(data), height)
    return preprocess(read_pnm(data), height)

"""Dump received-attention maps of every attention module as PGM images."""
import os

import numpy as np

from .attention import record_attention
from .imageio import write_pgm
from .tensor import no_grad


def to_gray(m):
    """Min-max normalise a 2-D map to uint8 0..255 (a constant map becomes all zeros)."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def collect_maps(model, image):
    """Run ``image[3, H, W]`` through ``model``; returns ``{module_path: [heads, h, w]}``."""
    model.eval()
    x = np.asarray(image, dtype=np.float32)[None]
    with no_grad(), record_attention() as maps:
        model.logits(x)
    return dict(maps)


def dump_attention(model, image, out_dir):
    """Write one PGM per attention module and head; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for path, maps in sorted(collect_maps(model, image).items()):
        for h in range(maps.shape[0]):
            fname = os.path.join(out_dir, f"{path}.head{h}.pgm")
            write_pgm(fname, to_gray(maps[h]))
            written.append(fname)
    return written

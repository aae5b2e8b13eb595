"""Procedural glyph-string images: a desk-scale stand-in for real text crops."""
from dataclasses import dataclass, field

import numpy as np

from .ctc import Alphabet
from .nn import make_rng


def make_glyphs(n, seed=1234, size=8, min_distance=12):
    """``n`` distinct random ``size x size`` binary bitmaps.

    Each glyph keeps its outer columns non-empty so the rendered width is the
    full bitmap width, and every pair differs in at least ``min_distance``
    pixels.
    """
    rng = make_rng(seed)
    glyphs = []
    while len(glyphs) < n:
        g = rng.random((size, size)) < 0.45
        if not (g[:, 0].any() and g[:, -1].any() and g[0].any() and g[-1].any()):
            continue
        if any(np.sum(g != h) < min_distance for h in glyphs):
            continue
        glyphs.append(g)
    return np.stack(glyphs).astype(np.float32)


@dataclass
class SynthSpec:
    alphabet: Alphabet = field(default_factory=lambda: Alphabet.from_string("0123456789"))
    height: int = 32
    width: int = 96
    min_len: int = 1
    max_len: int = 5
    scales: tuple = (2, 3)
    jitter: tuple = (1, 4)
    noise: float = 0.1
    glyph_seed: int = 1234

    def __post_init__(self):
        self.glyphs = make_glyphs(len(self.alphabet.symbols), self.glyph_seed)
        if 8 * max(self.scales) > self.height:
            raise ValueError("rendered glyphs must fit the image height")


def _fits(n, scale, gaps, width):
    return n * 8 * scale + sum(gaps) <= width


def synth_sample(spec: SynthSpec, rng, label=None):
    """Render one sample: ``(image[3, H, W] in [-1, 1], label)``.

    Glyphs go left to right at a common random scale with random gaps and
    vertical offsets, then Gaussian noise is added. Labels that do not fit
    the width are redrawn.
    """
    sym = spec.alphabet.symbols
    for _ in range(1000):
        text = label
        if text is None:
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            text = "".join(sym[int(i)] for i in rng.integers(0, len(sym), n))
        scale = int(rng.choice(spec.scales))
        gaps = [int(g) for g in rng.integers(spec.jitter[0], spec.jitter[1] + 1, len(text) + 1)]
        gaps[0] = int(rng.integers(0, spec.jitter[1] + 1))
        if _fits(len(text), scale, gaps, spec.width):
            break
        if label is not None and not any(_fits(len(text), s, [spec.jitter[0]] * (len(text) + 1), spec.width)
                                         for s in spec.scales):
            raise ValueError(f"label {label!r} cannot fit width {spec.width}")
    else:
        raise RuntimeError("could not place label")
    img = np.zeros((spec.height, spec.width), dtype=np.float32)
    x = gaps[0]
    gsz = 8 * scale
    idx = spec.alphabet.encode(text)
    for k, gi in enumerate(idx):
        y = int(rng.integers(0, spec.height - gsz + 1))
        bmp = np.kron(spec.glyphs[gi - 1], np.ones((scale, scale), np.float32))
        img[y:y + gsz, x:x + gsz] = np.maximum(img[y:y + gsz, x:x + gsz], bmp)
        x += gsz + gaps[k + 1]
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, img.shape).astype(np.float32)
    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0)
    return np.broadcast_to(img, (3,) + img.shape).copy(), text


def make_dataset(spec: SynthSpec, n, seed):
    """``n`` samples as a single-channel array ``[n, 1, H, W]`` plus labels."""
    rng = make_rng(seed)
    images = np.empty((n, 1, spec.height, spec.width), dtype=np.float32)
    labels = []
    for i in range(n):
        img, text = synth_sample(spec, rng)
        images[i, 0] = img[0]
        labels.append(text)
    return images, labels

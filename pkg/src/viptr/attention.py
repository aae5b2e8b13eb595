"""Attention mixers, positional embeddings, FFN and the two block layouts.

All modules here take channels-last feature maps ``x[B, H, W, C]``. The four
mixers are named by their permutation-grammar codes: ``L1`` CSWin stripes,
``L2`` decomposed Manhattan attention, ``G1`` MHSA, ``G2`` overlapping
spatial-reduction attention.
"""
import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import DWConv, LayerNorm, Linear, Module, trunc_normal
from .tensor import Parameter

LOCAL_KINDS = ("L1", "L2")
GLOBAL_KINDS = ("G1", "G2")
KIND_NAMES = {"L1": "cswin", "L2": "masa", "G1": "mhsa", "G2": "osra"}
PE_KINDS = ("none", "ape", "cpe", "lepe")


@dataclass
class AttnConfig:
    dim: int
    heads: int
    kind: str
    split_window: int = 1
    reduction_ratio: int = 2
    gammas: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KIND_NAMES:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.split_window not in (1, 2):
            raise ValueError("split window must be 1 or 2")
        if self.reduction_ratio < 1:
            raise ValueError("reduction ratio must be >= 1")
        if self.kind == "L2":
            if not self.gammas:
                self.gammas = gamma_schedule(self.heads)
            if len(self.gammas) != self.heads or not all(0.0 < g < 1.0 for g in self.gammas):
                raise ValueError("need one decay in (0, 1) per head")


def gamma_schedule(heads):
    """Per-head decay ``1 - 2**-(4 + h)`` clamped to [0.5, 0.999]."""
    return [float(min(max(1.0 - 2.0 ** -(4 + h), 0.5), 0.999)) for h in range(heads)]


def decay_matrix_1d(length, gamma):
    idx = np.arange(length)
    return gamma ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# attention-map capture for dump-attn
# ---------------------------------------------------------------------------

_rec = threading.local()


@contextmanager
def record_attention():
    """Collect per-block received-attention maps ``{path: [heads, H, W]}``."""
    maps = {}
    prev = getattr(_rec, "maps", None)
    _rec.maps = maps
    try:
        yield maps
    finally:
        _rec.maps = prev


def _recording():
    return getattr(_rec, "maps", None)


def _store(module, array):
    maps = _recording()
    if maps is not None:
        maps[getattr(module, "path", type(module).__name__)] = np.asarray(array, dtype=np.float64)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _heads_first(t, B, L, h, d):
    # [B, L, h*d] -> [B, h, L, d]
    return t.reshape(B, L, h, d).transpose(0, 2, 1, 3)


class _QKVMixer(Module):
    def __init__(self, dim, heads, rng, lepe):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.lepe = DWConv(dim) if lepe else None


class MHSA(_QKVMixer):
    """Full multi-head self-attention over all H*W tokens."""

    def __init__(self, dim, heads, rng, lepe=False):
        super().__init__(dim, heads, rng, lepe)

    def forward(self, x):
        B, H, W, C = x.shape
        L, h, d = H * W, self.heads, self.head_dim
        qkv = self.qkv(x)
        q = _heads_first(qkv[..., :C].reshape(B, L, C), B, L, h, d)
        k = _heads_first(qkv[..., C:2 * C].reshape(B, L, C), B, L, h, d)
        v_map = qkv[..., 2 * C:]
        v = _heads_first(v_map.reshape(B, L, C), B, L, h, d)
        if _recording() is not None:
            o, a = ops.attention(q, k, v, self.scale, return_weights=True)
            _store(self, a[0].mean(axis=1).reshape(h, H, W))
        else:
            o = ops.attention(q, k, v, self.scale)
        o = o.transpose(0, 2, 1, 3).reshape(B, H, W, C)
        if self.lepe is not None:
            o = o + self.lepe(v_map)
        return self.proj(o)


class CSWin(_QKVMixer):
    """Cross-shaped stripe attention.

    ``heads // 2`` heads attend inside horizontal stripes (``sw`` rows by the
    full width), the rest inside vertical stripes (full height by ``sw``
    columns). Stripes that do not tile the map are padded and the padding is
    masked out of the keys.
    """

    def __init__(self, dim, heads, rng, split_window=1, lepe=True):
        super().__init__(dim, heads, rng, lepe)
        self.sw = split_window
        self.h_heads = heads // 2
        self.v_heads = heads - self.h_heads

    def _stripes(self, q, k, v, nheads, axis, maps):
        """Attention within stripes along ``axis`` (1 = rows, 2 = columns)."""
        B, H, W, _ = q.shape
        d, sw = self.head_dim, self.sw
        n = H if axis == 1 else W
        padn = (-n) % sw
        mask = None
        if padn:
            widths = [(0, 0)] * 4
            widths[axis] = (0, padn)
            q, k, v = ops.pad(q, widths), ops.pad(k, widths), ops.pad(v, widths)
            valid = np.arange(n + padn) < n
        Hp, Wp = q.shape[1], q.shape[2]
        ns = (n + padn) // sw
        if axis == 1:
            def split(t):
                # B, ns, sw, W, h, d -> B, ns, h, sw*W, d
                return t.reshape(B, ns, sw, Wp, nheads, d).transpose(0, 1, 4, 2, 3, 5).reshape(B, ns, nheads, sw * Wp, d)
            if padn:
                mask = np.repeat(valid.reshape(ns, sw, 1), Wp, axis=2).reshape(ns, 1, sw * Wp)
        else:
            def split(t):
                # B, H, ns, sw, h, d -> B, ns, h, H*sw, d
                return t.reshape(B, Hp, ns, sw, nheads, d).transpose(0, 2, 4, 1, 3, 5).reshape(B, ns, nheads, Hp * sw, d)
            if padn:
                mask = np.repeat(valid.reshape(ns, 1, sw), Hp, axis=1).reshape(ns, 1, Hp * sw)
        qs, ks, vs = split(q), split(k), split(v)
        rec = _recording() is not None
        if rec:
            o, a = ops.attention(qs, ks, vs, self.scale, key_mask=mask, return_weights=True)
            recv = a[0].mean(axis=2)  # ns, h, Lk
        else:
            o = ops.attention(qs, ks, vs, self.scale, key_mask=mask)
        if axis == 1:
            o = o.reshape(B, ns, nheads, sw, Wp, d).transpose(0, 1, 3, 4, 2, 5).reshape(B, Hp, Wp, nheads * d)
            if rec:
                recv = recv.reshape(ns, nheads, sw, Wp).transpose(1, 0, 2, 3).reshape(nheads, Hp, Wp)
        else:
            o = o.reshape(B, ns, nheads, Hp, sw, d).transpose(0, 3, 1, 4, 2, 5).reshape(B, Hp, Wp, nheads * d)
            if rec:
                recv = recv.reshape(ns, nheads, Hp, sw).transpose(1, 2, 0, 3).reshape(nheads, Hp, Wp)
        if padn:
            o = o[:, :H, :W]
        if rec:
            maps.append(recv[:, :H, :W])
        return o

    def attend(self, x):
        """Stripe attention output before LePE and projection (``[B,H,W,C]``)."""
        B, H, W, C = x.shape
        qkv = self.qkv(x)
        return self._attend_qkv(qkv, C)

    def _attend_qkv(self, qkv, C):
        ch = self.h_heads * self.head_dim
        maps = []
        parts = []
        if self.h_heads:
            parts.append(self._stripes(qkv[..., :ch], qkv[..., C:C + ch], qkv[..., 2 * C:2 * C + ch],
                                       self.h_heads, 1, maps))
        if self.v_heads:
            parts.append(self._stripes(qkv[..., ch:C], qkv[..., C + ch:2 * C], qkv[..., 2 * C + ch:],
                                       self.v_heads, 2, maps))
        if maps:
            _store(self, np.concatenate(maps, axis=0))
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)

    def forward(self, x):
        C = x.shape[-1]
        qkv = self.qkv(x)
        o = self._attend_qkv(qkv, C)
        if self.lepe is not None:
            o = o + self.lepe(qkv[..., 2 * C:])
        return self.proj(o)


class MaSA(_QKVMixer):
    """Decomposed Manhattan self-attention.

    Width attention inside each row, then height attention inside each column
    applied to the row result. Each stage multiplies its softmax weights by
    ``gamma**|i-j|`` (per head) without renormalising. A depthwise 3x3 conv on
    V adds local context.
    """

    def __init__(self, dim, heads, rng, gammas=None):
        super().__init__(dim, heads, rng, lepe=True)
        self.gammas = list(gammas) if gammas else gamma_schedule(heads)
        self._decay_cache = {}

    def decay(self, length, dtype):
        key = (length, np.dtype(dtype).str)
        if key not in self._decay_cache:
            self._decay_cache[key] = np.stack([decay_matrix_1d(length, g) for g in self.gammas]).astype(dtype)
        return self._decay_cache[key]

    def forward(self, x):
        B, H, W, C = x.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(x)
        q5 = qkv[..., :C].reshape(B, H, W, h, d)
        k5 = qkv[..., C:2 * C].reshape(B, H, W, h, d)
        v_map = qkv[..., 2 * C:]
        v5 = v_map.reshape(B, H, W, h, d)
        rec = _recording() is not None
        # rows: B, H, h, W, d
        qw, kw, vw = (t.transpose(0, 1, 3, 2, 4) for t in (q5, k5, v5))
        res = ops.attention(qw, kw, vw, self.scale, decay=self.decay(W, x.dtype), return_weights=rec)
        ow, aw = res if rec else (res, None)
        # columns: B, W, h, H, d
        qh, kh = (t.transpose(0, 2, 3, 1, 4) for t in (q5, k5))
        vh = ow.transpose(0, 3, 2, 1, 4)
        res = ops.attention(qh, kh, vh, self.scale, decay=self.decay(H, x.dtype), return_weights=rec)
        oh, ah = res if rec else (res, None)
        if rec:
            col = ah[0].sum(axis=2)  # W, h, H(key row)
            recv = np.einsum("jhi,ihjk->hik", col, aw[0]) / (H * W)
            _store(self, recv)
        o = oh.transpose(0, 3, 1, 2, 4).reshape(B, H, W, C)
        o = o + self.lepe(v_map)
        return self.proj(o)


class OSRA(Module):
    """Attention of every token over an overlapped, strided reduction of the map.

    The reduction is a depthwise conv (kernel ``2*sr-1``, stride ``sr``,
    padding ``sr-1``), a pointwise projection and LayerNorm. On an axis
    shorter than the kernel the stride drops to 1.
    """

    def __init__(self, dim, heads, rng, sr=2, lepe=False):
        super().__init__()
        self.dim, self.heads, self.sr = dim, heads, sr
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        k = 2 * sr - 1
        self.kernel = k
        self.q = Linear(dim, dim, rng)
        self.sr_conv = DWConv(dim, kernel=k, stride=sr, padding=sr - 1, rng=rng, zero=False)
        self.sr_proj = Linear(dim, dim, rng)
        self.sr_norm = LayerNorm(dim)
        self.local = DWConv(dim) if lepe else None
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def strides(self, H, W):
        k = self.kernel
        return (self.sr if H >= k else 1, self.sr if W >= k else 1)

    def reduced_shape(self, H, W):
        sh, sw = self.strides(H, W)
        p = self.sr - 1
        return (H + 2 * p - self.kernel) // sh + 1, (W + 2 * p - self.kernel) // sw + 1

    def reduce(self, x):
        B, H, W, C = x.shape
        sh, sw = self.strides(H, W)
        r = ops.dwconv(x, self.sr_conv.weight, self.sr_conv.bias, (sh, sw), self.sr - 1)
        r = self.sr_norm(self.sr_proj(r))
        if self.local is not None:
            r = r + self.local(r)
        return r

    def forward(self, x):
        B, H, W, C = x.shape
        L, h, d = H * W, self.heads, self.head_dim
        q = _heads_first(self.q(x).reshape(B, L, C), B, L, h, d)
        r = self.reduce(x)
        Hr, Wr = r.shape[1], r.shape[2]
        Lr = Hr * Wr
        kv = self.kv(r).reshape(B, Lr, 2 * C)
        k = _heads_first(kv[..., :C], B, Lr, h, d)
        v = _heads_first(kv[..., C:], B, Lr, h, d)
        if _recording() is not None:
            o, a = ops.attention(q, k, v, self.scale, return_weights=True)
            recv = a[0].mean(axis=1).reshape(h, Hr, Wr)
            sh, sw = self.strides(H, W)
            up = np.repeat(np.repeat(recv, sh, axis=1), sw, axis=2)[:, :H, :W]
            up = np.pad(up, ((0, 0), (0, H - up.shape[1]), (0, W - up.shape[2])), mode="edge")
            _store(self, up)
        else:
            o = ops.attention(q, k, v, self.scale)
        o = o.transpose(0, 2, 1, 3).reshape(B, H, W, C)
        return self.proj(o)


def make_mixer(cfg: AttnConfig, rng, pe_kind="lepe"):
    lepe = pe_kind == "lepe"
    if cfg.kind == "G1":
        return MHSA(cfg.dim, cfg.heads, rng, lepe=lepe)
    if cfg.kind == "G2":
        return OSRA(cfg.dim, cfg.heads, rng, sr=cfg.reduction_ratio, lepe=lepe)
    if cfg.kind == "L1":
        return CSWin(cfg.dim, cfg.heads, rng, split_window=cfg.split_window, lepe=lepe)
    return MaSA(cfg.dim, cfg.heads, rng, gammas=cfg.gammas)


# ---------------------------------------------------------------------------
# positional embeddings
# ---------------------------------------------------------------------------

class CPE(Module):
    """``x + dwconv3x3(x)``, zero-initialised so it starts as identity."""

    def __init__(self, dim):
        super().__init__()
        self.conv = DWConv(dim)

    def forward(self, x):
        return x + self.conv(x)


class APE(Module):
    """Learned absolute table added once after the patch embedding.

    Inputs at a different resolution get a bilinearly resized table and a
    ``UserWarning``.
    """

    def __init__(self, dim, grid, rng):
        super().__init__()
        self.grid = tuple(grid)
        self.table = Parameter(trunc_normal(rng, (grid[0], grid[1], dim)))

    def forward(self, x):
        B, H, W, C = x.shape
        if (H, W) == self.grid:
            return x + self.table
        warnings.warn(f"absolute position table {self.grid} resized to {(H, W)}", UserWarning, stacklevel=2)
        return x + ops.resize_bilinear_hwc(self.table, H, W)


def positional_embedding(x, kind, state=None):
    """Apply the entry-side positional embedding for ``kind``.

    ``state`` is the :class:`APE` or :class:`CPE` module where one is needed.
    LePE lives inside the mixers, so it is the identity here.
    """
    if kind in ("none", "lepe"):
        return x
    if kind in ("ape", "cpe"):
        return state(x)
    raise ValueError(f"unknown positional embedding {kind!r}")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class FFN(Module):
    def __init__(self, dim, ratio, rng):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class MixBlock(Module):
    """Pre-norm residual block: ``y = x + Attn(LN(x))``, ``z = y + FFN(LN(y))``."""

    def __init__(self, cfg: AttnConfig, rng, pe_kind="lepe", ffn_ratio=4.0):
        super().__init__()
        self.cfg = cfg
        self.cpe = CPE(cfg.dim) if pe_kind == "cpe" else None
        self.norm1 = LayerNorm(cfg.dim)
        self.mixer = make_mixer(cfg, rng, pe_kind)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = FFN(cfg.dim, ffn_ratio, rng)

    def forward(self, x):
        if self.cpe is not None:
            x = self.cpe(x)
        y = x + self.mixer(self.norm1(x))
        return y + self.ffn(self.norm2(y))


class ParallelBlock(Module):
    """Local and global mixers side by side on the two channel halves.

    The halves are concatenated in place of the attention sub-layer; one
    LayerNorm + FFN with residual follows.
    """

    def __init__(self, dim, heads, local_kind, global_kind, rng, pe_kind="lepe", ffn_ratio=4.0,
                 split_window=2, reduction_ratio=2):
        super().__init__()
        if dim % 2:
            raise ValueError(f"parallel block needs an even channel count, got {dim}")
        half = dim // 2
        bh = max(1, heads // 2)
        self.half = half
        self.local_cfg = AttnConfig(half, bh, local_kind, split_window=split_window)
        self.global_cfg = AttnConfig(half, bh, global_kind, reduction_ratio=reduction_ratio)
        self.cpe = CPE(dim) if pe_kind == "cpe" else None
        self.norm1 = LayerNorm(dim)
        self.local = make_mixer(self.local_cfg, rng, pe_kind)
        self.glob = make_mixer(self.global_cfg, rng, pe_kind)
        self.norm2 = LayerNorm(dim)
        self.ffn = FFN(dim, ffn_ratio, rng)

    def branches(self, x):
        h = self.norm1(x)
        return self.local(h[..., :self.half]), self.glob(h[..., self.half:])

    def forward(self, x):
        if self.cpe is not None:
            x = self.cpe(x)
        lo, gl = self.branches(x)
        y = x + ops.concat([lo, gl], axis=-1)
        return y + self.ffn(self.norm2(y))

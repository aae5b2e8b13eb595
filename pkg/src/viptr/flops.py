"""Analytic multiply-accumulate counter.

One MAC counts once (FLOPs == MACs, the convention of the published tables).
Counted: dense/grouped/depthwise convolutions, linear layers, and the two
attention products (QK^T and AV) at their actual token counts. Norms,
activations, softmax and elementwise ops are not counted.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field

from .backbone import VariantConfig, stage_kinds, variant


@dataclass
class FlopReport:
    input_hw: tuple
    stages: "OrderedDict[str, dict]" = field(default_factory=OrderedDict)

    def add(self, stage, kind, n):
        d = self.stages.setdefault(stage, {"conv": 0, "linear": 0, "attention": 0})
        d[kind] += int(n)

    @property
    def total(self):
        return sum(sum(d.values()) for d in self.stages.values())

    def by_kind(self):
        out = {"conv": 0, "linear": 0, "attention": 0}
        for d in self.stages.values():
            for k, v in d.items():
                out[k] += v
        return out

    def stage_total(self, stage):
        return sum(self.stages.get(stage, {}).values())


def _conv(r, stage, cout, cin_per_group, k, ho, wo):
    r.add(stage, "conv", cout * cin_per_group * k * k * ho * wo)


def _lin(r, stage, tokens, din, dout):
    r.add(stage, "linear", tokens * din * dout)


def _mixer(r, stage, kind, C, heads, H, W, pe, sw, sr):
    L = H * W
    d = C // heads
    lepe = pe == "lepe"
    if kind == "G2":
        k = 2 * sr - 1
        sh_, sw_ = (sr if H >= k else 1), (sr if W >= k else 1)
        Hr = (H + 2 * (sr - 1) - k) // sh_ + 1
        Wr = (W + 2 * (sr - 1) - k) // sw_ + 1
        Lr = Hr * Wr
        _lin(r, stage, L, C, C)                     # q
        _conv(r, stage, C, 1, k, Hr, Wr)            # depthwise reduction
        _lin(r, stage, Lr, C, C)                    # pointwise projection
        if lepe:
            _conv(r, stage, C, 1, 3, Hr, Wr)
        _lin(r, stage, Lr, C, 2 * C)                # kv
        r.add(stage, "attention", heads * L * Lr * 2 * d)
        _lin(r, stage, L, C, C)                     # proj
        return
    _lin(r, stage, L, C, 3 * C)
    if kind == "G1":
        r.add(stage, "attention", heads * L * L * 2 * d)
    elif kind == "L1":
        nh = heads // 2
        nv = heads - nh
        if nh:
            Hp = math.ceil(H / sw) * sw
            ls = sw * W
            r.add(stage, "attention", (Hp // sw) * nh * ls * ls * 2 * d)
        if nv:
            Wp = math.ceil(W / sw) * sw
            ls = H * sw
            r.add(stage, "attention", (Wp // sw) * nv * ls * ls * 2 * d)
    elif kind == "L2":
        r.add(stage, "attention", H * heads * W * W * 2 * d + W * heads * H * H * 2 * d)
    if lepe or kind == "L2":
        _conv(r, stage, C, 1, 3, H, W)
    _lin(r, stage, L, C, C)


def count_flops(cfg, input_hw=(32, 96), scope="backbone"):
    """MACs of one forward pass for a ``(H, W)`` image, broken down per stage."""
    if isinstance(cfg, str):
        cfg = variant(cfg)
    H, W = input_hw
    C, heads = cfg.channels, cfg.heads
    pe = cfg.pe_kind
    sws = list(cfg.sw_per_stage) + [1]
    sr = cfg.reduction_ratio
    rep = FlopReport((H, W))

    mid = C[0] // 2
    _conv(rep, "patch_embed", mid, 3, 3, H // 2, W // 2)
    _conv(rep, "patch_embed", C[0], mid, 3, H // 4, W // 4)

    h, w = H // 4, W // 4
    layout = stage_kinds(cfg)
    for i in range(4):
        stage = f"stage{i + 1}"
        c = C[i]
        L = h * w
        for kind in layout[i]:
            if pe == "cpe":
                _conv(rep, stage, c, 1, 3, h, w)
            if isinstance(kind, tuple):
                half, bh = c // 2, max(1, heads[i] // 2)
                _mixer(rep, stage, kind[0], half, bh, h, w, pe, sws[i], sr)
                _mixer(rep, stage, kind[1], half, bh, h, w, pe, sws[i], sr)
            else:
                _mixer(rep, stage, kind, c, heads[i], h, w, pe, sws[i], sr)
            hidden = int(round(c * cfg.ffn_ratio))
            _lin(rep, stage, L, c, hidden)
            _lin(rep, stage, L, hidden, c)
        if i < 2:
            _conv(rep, f"hdr{i + 1}", C[i + 1], c, 3, h // 2, w)
            h //= 2
        elif i == 2:
            _lin(rep, "hdr_pool", w, C[2], C[3])
            h = 1
    if scope == "full":
        _lin(rep, "head", w, C[3], cfg.num_classes)
    return rep


__all__ = ["FlopReport", "count_flops", "VariantConfig"]

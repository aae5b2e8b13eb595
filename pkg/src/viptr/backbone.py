"""Permutation grammar, variant registry and the four-stage recogniser."""
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attention import (APE, GLOBAL_KINDS, LOCAL_KINDS, PE_KINDS, AttnConfig, MixBlock,
                        ParallelBlock)
from .nn import (BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Module, ModuleList, make_rng,
                 skip_init)
from .tensor import NumericError, Tensor


class PermutationError(ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class PermutationSpec:
    stage1: str
    middle_local: str
    middle_global: str
    parallel: bool
    stage4: str

    def __str__(self):
        sep = "//" if self.parallel else ""
        return f"[{self.stage1}][{self.middle_local}{sep}{self.middle_global}][{self.stage4}]"


def parse_permutation(text):
    """Parse ``[Li][LjGs][Gt]`` (series) or ``[Li][Lj//Gs][Gt]`` (parallel)."""
    s = text.replace(" ", "")
    pos = 0

    def expect(lit):
        nonlocal pos
        if not s.startswith(lit, pos):
            raise PermutationError(f"expected {lit!r}", pos)
        pos += len(lit)

    def kind(allowed, what):
        nonlocal pos
        m = re.match(r"[LG][12]", s[pos:])
        if not m:
            raise PermutationError(f"expected {what} attention code", pos)
        code = m.group(0)
        if code not in allowed:
            raise PermutationError(f"{code} is not a {what} attention code", pos)
        pos += 2
        return code

    expect("[")
    st1 = kind(LOCAL_KINDS, "local")
    expect("]")
    expect("[")
    loc = kind(LOCAL_KINDS, "local")
    parallel = s.startswith("//", pos)
    if parallel:
        pos += 2
    glb = kind(GLOBAL_KINDS, "global")
    expect("]")
    expect("[")
    st4 = kind(GLOBAL_KINDS, "global")
    expect("]")
    if pos != len(s):
        raise PermutationError("trailing characters", pos)
    return PermutationSpec(st1, loc, glb, parallel, st4)


@dataclass
class VariantConfig:
    channels: list
    depths: list
    heads: list
    permutation: str
    pe_kind: str = "lepe"
    sw_per_stage: list = field(default_factory=lambda: [1, 2, 2])
    num_classes: int = 37
    ffn_ratio: float = 4.0
    reduction_ratio: int = 2
    input_height: int = 32
    ape_width: int = 96
    drop_rate: float = 0.1
    name: str = "custom"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.depths = [int(d) for d in self.depths]
        self.heads = [int(h) for h in self.heads]
        if not (len(self.channels) == len(self.depths) == len(self.heads) == 4):
            raise ValueError("channels, depths and heads need four entries each")
        for c, h in zip(self.channels, self.heads):
            if h < 1 or c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")
        if min(self.depths) < 1:
            raise ValueError("every stage needs at least one block")
        if self.num_classes < 2:
            raise ValueError("need the blank plus at least one symbol")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"pe_kind must be one of {PE_KINDS}")
        if self.input_height % 16:
            raise ValueError("input height must be a multiple of 16")
        spec = self.spec
        if spec.parallel:
            for c in self.channels[1:3]:
                if c % 2:
                    raise ValueError("parallel stages need even channel counts")

    @property
    def spec(self):
        return parse_permutation(self.permutation)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Rows of the published variant table. ``ffn_ratio`` is not published; these
# values put the parameter counts on the published ones (see README).
REGISTRY = {
    "sviptr-v1-t": dict(channels=[64, 128, 256, 192], depths=[3, 3, 3, 3], heads=[2, 4, 4, 8],
                        permutation="[L1][L1G2][G1]", ffn_ratio=2.875),
    "sviptr-v2-t": dict(channels=[64, 128, 256, 192], depths=[3, 3, 3, 3], heads=[2, 4, 4, 8],
                        permutation="[L1][L1//G2][G1]", ffn_ratio=2.375),
    "sviptr-v1-l": dict(channels=[192, 256, 512, 384], depths=[3, 7, 2, 9], heads=[6, 8, 8, 16],
                        permutation="[L2][L2G2][G1]", ffn_ratio=5.375),
    "sviptr-v2-b": dict(channels=[128, 256, 384, 256], depths=[3, 6, 6, 9], heads=[4, 8, 8, 8],
                        permutation="[L2][L2//G2][G1]", ffn_ratio=3.5),
}


def variant(name, **overrides):
    if name not in REGISTRY:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(REGISTRY)}")
    kw = dict(REGISTRY[name])
    kw.update(overrides)
    return VariantConfig(name=name, **kw)


def stage_kinds(cfg: VariantConfig):
    """Block layout per stage: a list of kind codes, or ``(local, global)`` pairs in parallel stages."""
    spec = cfg.spec
    out = [[spec.stage1] * cfg.depths[0]]
    for n in cfg.depths[1:3]:
        if spec.parallel:
            out.append([(spec.middle_local, spec.middle_global)] * n)
        else:
            out.append([spec.middle_local] * math.ceil(n / 2) + [spec.middle_global] * (n // 2))
    out.append([spec.stage4] * cfg.depths[3])
    return out


# ---------------------------------------------------------------------------
# stems and height reductions
# ---------------------------------------------------------------------------

class PatchEmbed(Module):
    """Two 3x3 stride-2 conv + BN + GELU layers: ``[B,3,H,W] -> [B,H/4,W/4,C0]``."""

    def __init__(self, c0, rng):
        super().__init__()
        mid = c0 // 2
        self.conv1 = Conv2d(3, mid, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, c0, 3, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(c0)

    def forward(self, img):
        H, W = img.shape[2], img.shape[3]
        if H % 4 or W % 4:
            raise ValueError(f"input {H}x{W} must have height and width divisible by 4")
        x = ops.gelu(self.bn1(self.conv1(img)))
        x = ops.gelu(self.bn2(self.conv2(x)))
        return x.transpose(0, 2, 3, 1)


class HDRConv(Module):
    """3x3 conv with stride (2, 1) then LayerNorm: halves height, keeps width."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=(2, 1), padding=1)
        self.norm = LayerNorm(cout)

    def forward(self, x):
        if x.shape[1] % 2:
            raise ValueError(f"height reduction needs an even height, got {x.shape[1]}")
        y = self.conv(x.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)
        return self.norm(y)


class HDRPool(Module):
    """Average height to 1, then FC + Hardswish + Dropout per width position."""

    def __init__(self, cin, cout, rng, p_drop=0.1):
        super().__init__()
        self.fc = Linear(cin, cout, rng)
        self.drop = Dropout(p_drop, rng)

    def forward(self, x):
        x = ops.mean(x, axis=1, keepdims=True)
        return self.drop(ops.hardswish(self.fc(x)))


# ---------------------------------------------------------------------------
# the recogniser
# ---------------------------------------------------------------------------

class SVIPTR(Module):
    def __init__(self, cfg: VariantConfig, seed=0):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        rng = make_rng(seed)
        C, heads = cfg.channels, cfg.heads
        self.patch_embed = PatchEmbed(C[0], rng)
        if cfg.pe_kind == "ape":
            self.ape = APE(C[0], (cfg.input_height // 4, cfg.ape_width // 4), rng)
        else:
            self.ape = None
        layout = stage_kinds(cfg)
        sws = list(cfg.sw_per_stage) + [1]
        stages = []
        for i in range(4):
            blocks = ModuleList()
            for kind in layout[i]:
                if isinstance(kind, tuple):
                    blocks.append(ParallelBlock(C[i], heads[i], kind[0], kind[1], rng, cfg.pe_kind,
                                                cfg.ffn_ratio, sws[i], cfg.reduction_ratio))
                else:
                    acfg = AttnConfig(C[i], heads[i], kind, split_window=sws[i],
                                      reduction_ratio=cfg.reduction_ratio)
                    blocks.append(MixBlock(acfg, rng, cfg.pe_kind, cfg.ffn_ratio))
            stages.append(blocks)
        self.stage1, self.stage2, self.stage3, self.stage4 = stages
        self.hdr1 = HDRConv(C[0], C[1], rng)
        self.hdr2 = HDRConv(C[1], C[2], rng)
        self.hdr_pool = HDRPool(C[2], C[3], rng, cfg.drop_rate)
        self.head = Linear(C[3], cfg.num_classes, rng)
        self.assign_names()

    def stages(self):
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def _run_stage(self, blocks, x, check):
        for blk in blocks:
            x = blk(x)
            if check:
                ops.check_finite(x, blk.path)
        return x

    def features_nhwc(self, img, check=True):
        """Backbone output in channels-last layout ``[B, 1, W/4, C3]``."""
        x = self.patch_embed(img)
        if self.ape is not None:
            x = self.ape(x)
        x = self._run_stage(self.stage1, x, check)
        x = self.hdr1(x)
        x = self._run_stage(self.stage2, x, check)
        x = self.hdr2(x)
        x = self._run_stage(self.stage3, x, check)
        x = self.hdr_pool(x)
        return self._run_stage(self.stage4, x, check)

    def forward(self, img, check=True):
        """Feature sequence ``[B, C3, 1, W/4]``."""
        return self.features_nhwc(_as_tensor(img), check).transpose(0, 3, 1, 2)

    def logits(self, img, check=True):
        """Per-position class scores ``[B, W/4, N]``."""
        f = self.features_nhwc(_as_tensor(img), check)
        B, _, T, C = f.shape
        return self.head(f.reshape(B, T, C))

    def shape_chain(self, img):
        """Feature shapes ``(H, W, C)`` after embed and each reduction."""
        shapes = []
        x = self.patch_embed(_as_tensor(img))
        shapes.append(x.shape[1:])
        x = self._run_stage(self.stage1, x, False)
        x = self.hdr1(x)
        shapes.append(x.shape[1:])
        x = self._run_stage(self.stage2, x, False)
        x = self.hdr2(x)
        shapes.append(x.shape[1:])
        x = self._run_stage(self.stage3, x, False)
        x = self.hdr_pool(x)
        shapes.append(x.shape[1:])
        return shapes


def _as_tensor(img):
    if isinstance(img, Tensor):
        return img
    return Tensor(np.asarray(img, dtype=np.float32))


def build_model(cfg, seed=0, init=True):
    """Build a model; ``init=False`` skips random initialisation (zeros), for counting."""
    if isinstance(cfg, str):
        cfg = variant(cfg)
    if init:
        return SVIPTR(cfg, seed)
    with skip_init():
        return SVIPTR(cfg, seed)


def count_params(model, scope="backbone"):
    """Exact scalar count; ``backbone`` leaves out the CTC head."""
    if scope not in ("backbone", "full"):
        raise ValueError("scope is 'backbone' or 'full'")
    total = 0
    for name, p in model.named_parameters():
        if scope == "backbone" and name.startswith("head."):
            continue
        total += p.data.size
    return int(total)


__all__ = ["PermutationSpec", "PermutationError", "parse_permutation", "VariantConfig", "REGISTRY",
           "variant", "stage_kinds", "PatchEmbed", "HDRConv", "HDRPool", "SVIPTR", "build_model",
           "count_params", "NumericError"]

"""Module containers and the parameterised primitive layers."""
import threading
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Parameter, Tensor


def make_rng(seed):
    """Counter-based 64-bit generator (Philox) used for init, dropout and data."""
    return np.random.Generator(np.random.Philox(seed))


_init = threading.local()


@contextmanager
def skip_init():
    """Allocate weights as zeros instead of sampling them."""
    prev = getattr(_init, "skip", False)
    _init.skip = True
    try:
        yield
    finally:
        _init.skip = prev


def trunc_normal(rng, shape, std=0.02, dtype=DEFAULT_DTYPE):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    if getattr(_init, "skip", False):
        return np.zeros(shape, dtype)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = name
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for mname, m in self._modules.items():
            yield from m.named_modules(prefix + mname + ".")

    def assign_names(self):
        """Stamp hierarchical names onto every parameter."""
        for name, p in self.named_parameters():
            p.name = name
        for name, m in self.named_modules():
            object.__setattr__(m, "path", name)
        return self

    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, m in self.named_modules():
            for b in m._buffers:
                object.__setattr__(m, b, getattr(m, b).astype(dtype))
        return self

    def state_dict(self):
        sd = OrderedDict()
        for name, p in self.named_parameters():
            sd[name] = p.data
        for name, b in self.named_buffers():
            sd[name] = b
        return sd

    def load_state_dict(self, sd):
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in sd:
                raise KeyError(f"missing parameter {name}")
            arr = np.asarray(sd[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = np.zeros_like(p.data)
        for mod_name, m in self.named_modules():
            for b in m._buffers:
                key = f"{mod_name}.{b}" if mod_name else b
                if key in sd:
                    cur = getattr(m, b)
                    object.__setattr__(m, b, np.asarray(sd[key]).astype(cur.dtype, copy=True).reshape(cur.shape))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, std=0.02):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (dout, din), std))
        self.bias = Parameter(np.zeros(dout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Dense or grouped convolution over NCHW input."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, groups=1, bias=True, std=0.02):
        super().__init__()
        kh, kw = ops._pair(kernel)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Parameter(trunc_normal(rng, (cout, cin // groups, kh, kw), std))
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class DWConv(Module):
    """Depthwise conv on channels-last tensors; zero-initialised by default."""

    def __init__(self, channels, kernel=3, stride=1, padding=None, bias=True, rng=None, zero=True):
        super().__init__()
        kh, kw = ops._pair(kernel)
        self.stride = stride
        self.padding = padding if padding is not None else (kh // 2, kw // 2)
        w = np.zeros((kh, kw, channels), DEFAULT_DTYPE) if zero else trunc_normal(rng, (kh, kw, channels))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ops.dwconv(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(dim, DEFAULT_DTYPE))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, DEFAULT_DTYPE))

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return ops.dropout(x, self.p, self.training, self.rng)


def count_parameters(module):
    return int(sum(p.data.size for p in module.parameters()))


def as_input(array, dtype=None):
    return Tensor(np.asarray(array, dtype=dtype or DEFAULT_DTYPE))

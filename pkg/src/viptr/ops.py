"""Differentiable primitives.

Each op computes its forward value with numpy (or a kernel from
:mod:`viptr.kernels`) and registers an analytic backward closure. Layouts:
``conv2d``/``batch_norm``/``pool_height_to_one`` take NCHW, ``dwconv`` and the
attention blocks take channels-last.
"""
import math
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# multiply-accumulate accounting (cross-checks the analytic FLOP counter)
# ---------------------------------------------------------------------------

_macs = threading.local()


@contextmanager
def count_macs():
    """Collect MACs of conv/linear/attention products executed in the block.

    Yields a dict ``{"conv": n, "linear": n, "attention": n}``.
    """
    prev = getattr(_macs, "acc", None)
    acc = {"conv": 0, "linear": 0, "attention": 0}
    _macs.acc = acc
    try:
        yield acc
    finally:
        _macs.acc = prev


def _tally(kind, n):
    acc = getattr(_macs, "acc", None)
    if acc is not None:
        acc[kind] += int(n)


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(a, like=None):
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype))


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_result(a.data @ b.data, (a, b), backward)


def reshape(x, shape):
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return make_result(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return make_result(x.data.transpose(axes), (x,), backward)


def getitem(x, idx):
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        x._accumulate(gx)

    return make_result(x.data[idx], (x,), backward)


def concat(xs, axis):
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def pad(x, widths):
    """Zero padding; ``widths`` as for ``np.pad``."""
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        x._accumulate(g[sl])

    return make_result(np.pad(x.data, widths), (x,), backward)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return make_result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis."""
    din = weight.shape[1]
    if x.shape[-1] != din:
        raise ValueError(f"linear: last dim {x.shape[-1]} != weight in-features {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    y = x2 @ weight.data.T
    if bias is not None:
        y += bias.data
    y = y.reshape(lead + (weight.shape[0],))
    _tally("linear", y.size * din)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return make_result(y, parents, backward)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation over NCHW input with weight ``[Cout, Cin/groups, kh, kw]``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, Cin, H, W = x.shape
    Cout, cpg, kh, kw = weight.shape
    if Cin % groups or Cout % groups:
        raise ValueError(f"conv2d: channels {Cin}->{Cout} not divisible by groups={groups}")
    if cpg != Cin // groups:
        raise ValueError(f"conv2d: weight expects {cpg * groups} input channels, got {Cin}")
    Ho, Wo = kernels.conv_out_size(H, kh, sh, ph), kernels.conv_out_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: empty output for input {H}x{W}, kernel {kh}x{kw}")

    if groups == Cin and Cout == Cin and cpg == 1:
        # depthwise: route through the channels-last kernel
        xt = x.data.transpose(0, 2, 3, 1)
        wt = weight.data[:, 0].transpose(1, 2, 0)
        y = kernels.dwconv_nhwc(np.ascontiguousarray(xt), np.ascontiguousarray(wt), sh, sw, ph, pw)
        y = y.transpose(0, 3, 1, 2)
        if bias is not None:
            y = y + bias.data[None, :, None, None]
        _tally("conv", y.size * kh * kw)

        def backward(g):
            gx, gw = kernels.dwconv_nhwc_backward(
                np.ascontiguousarray(xt), np.ascontiguousarray(wt),
                np.ascontiguousarray(g.transpose(0, 2, 3, 1)), sh, sw, ph, pw)
            if x.requires_grad:
                x._accumulate(gx.transpose(0, 3, 1, 2))
            if weight.requires_grad:
                weight._accumulate(gw.transpose(2, 0, 1)[:, None])
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return make_result(np.ascontiguousarray(y), parents, backward)

    cols, outs = [], []
    co = Cout // groups
    for gi in range(groups):
        xs = x.data[:, gi * cpg:(gi + 1) * cpg]
        c = kernels.im2col(np.ascontiguousarray(xs), kh, kw, sh, sw, ph, pw)
        wm = weight.data[gi * co:(gi + 1) * co].reshape(co, -1)
        cols.append(c)
        outs.append((c.reshape(-1, c.shape[-1]) @ wm.T).reshape(B, -1, co))  # B, P, co
    y = np.concatenate(outs, axis=-1).transpose(0, 2, 1).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    _tally("conv", y.size * cpg * kh * kw)

    def backward(g):
        gm = g.reshape(B, Cout, Ho * Wo).transpose(0, 2, 1)  # B,P,Cout
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for gi in range(groups):
            gg = gm[:, :, gi * co:(gi + 1) * co]
            wm = weight.data[gi * co:(gi + 1) * co].reshape(co, -1)
            if gw is not None:
                gw[gi * co:(gi + 1) * co] = (gg.reshape(-1, co).T @ cols[gi].reshape(-1, cols[gi].shape[-1])).reshape(co, cpg, kh, kw)
            if gx is not None:
                gcols = (gg.reshape(-1, co) @ wm).reshape(B, Ho * Wo, -1)
                gx[:, gi * cpg:(gi + 1) * cpg] = kernels.col2im(gcols, (B, cpg, H, W), kh, kw, sh, sw, ph, pw)
        if gx is not None:
            x._accumulate(gx)
        if gw is not None:
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, backward)


def dwconv(x, weight, bias=None, stride=1, padding=1):
    """Depthwise conv on channels-last ``x[B,H,W,C]`` with ``weight[kh,kw,C]``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xd = np.ascontiguousarray(x.data)
    y = kernels.dwconv_nhwc(xd, weight.data, sh, sw, ph, pw)
    if bias is not None:
        y = y + bias.data
    _tally("conv", y.size * weight.shape[0] * weight.shape[1])

    def backward(g):
        gx, gw = kernels.dwconv_nhwc_backward(xd, weight.data, np.ascontiguousarray(g), sh, sw, ph, pw)
        if x.requires_grad:
            x._accumulate(gx)
        if weight.requires_grad:
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis (population variance), then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return make_result(y, (x, gamma, beta), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalisation of NCHW input.

    Training mode normalises with batch statistics and updates the running
    buffers in place as ``run = momentum * run + (1 - momentum) * batch``.
    """
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(shp)
        var = (xc * xc).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
        inv = (1.0 / np.sqrt(var + eps)).reshape(shp)
        xhat = xc * inv
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(shp)
        xhat = (x.data - running_mean.reshape(shp)) * inv
    y = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(shp)
            if training:
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * inv
            x._accumulate(gx)

    return make_result(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    d = x.data
    u = _GELU_C * (d + 0.044715 * (d * d * d))
    t = np.tanh(u)
    y = 0.5 * d * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du))

    return make_result(y, (x,), backward)


def hardswish(x):
    d = x.data
    y = d * np.clip(d + 3.0, 0.0, 6.0) / 6.0

    def backward(g):
        dy = np.where(d < -3.0, 0.0, np.where(d > 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        x._accumulate(g * dy.astype(d.dtype))

    return make_result(y, (x,), backward)


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "hardswish":
        return hardswish(x)
    raise ValueError(f"unknown activation {kind!r}")


def _softmax(a):
    m = a.max(axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis (max-subtracted)."""
    p = _softmax(x.data)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make_result(p, (x,), backward)


def log_softmax(x):
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        x._accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return make_result(y, (x,), backward)


def dropout(x, p, training, rng):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return make_result(x.data * keep, (x,), backward)


def pool_height_to_one(x):
    """Average over the height axis of an NCHW tensor."""
    return mean(x, axis=2, keepdims=True)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Bilinear (half-pixel centres) resampling matrix of shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        f = src - lo
        m[o, lo] += 1.0 - f
        m[o, hi] += f
    return m


def resize_bilinear_hwc(t, out_h, out_w):
    """Resize a ``[H, W, C]`` tensor with separable bilinear weights."""
    H, W, _ = t.shape
    rh = interp_matrix(H, out_h, t.dtype)
    rw = interp_matrix(W, out_w, t.dtype)
    y = np.einsum("ah,hwc,bw->abc", rh, t.data, rw)

    def backward(g):
        t._accumulate(np.einsum("ah,abc,bw->hwc", rh, g, rw))

    return make_result(y, (t,), backward)


def attention(q, k, v, scale, decay=None, key_mask=None, return_weights=False):
    """Scaled dot-product attention with optional post-softmax decay.

    ``q[..., Lq, d]``, ``k[..., Lk, d]``, ``v[..., Lk, dv]``. ``decay`` (a
    constant broadcastable to ``[..., Lq, Lk]``) multiplies the softmax
    weights without renormalising. ``key_mask`` (bool, ``[..., Lk]``) marks
    valid keys. Returns the output, plus the applied weights when asked.
    """
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if key_mask is not None:
        s = np.where(key_mask[..., None, :], s, -np.inf)
    p = _softmax(s)
    a = p * decay if decay is not None else p
    a = a.astype(q.dtype, copy=False)
    out = a @ v.data
    lq, lk, d = q.shape[-2], k.shape[-2], q.shape[-1]
    batch = int(np.prod(s.shape[:-2]))
    _tally("attention", batch * lq * lk * (d + v.shape[-1]))

    def backward(g):
        if v.requires_grad:
            v._accumulate(_unbroadcast(np.swapaxes(a, -1, -2) @ g, v.shape))
        ga = g @ np.swapaxes(v.data, -1, -2)
        gp = ga * decay if decay is not None else ga
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            q._accumulate(_unbroadcast(gs @ k.data, q.shape))
        if k.requires_grad:
            k._accumulate(_unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape))

    res = make_result(out, (q, k, v), backward)
    if return_weights:
        return res, a
    return res


def check_finite(x, where):
    from .tensor import NumericError
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values produced at {where}")
    return x

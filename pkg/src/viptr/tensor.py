"""Recording reverse-mode tensors.

A :class:`Tensor` wraps a numpy array. Ops in :mod:`viptr.ops` build new
tensors and, while recording is enabled and some input requires a gradient,
attach a closure that maps the output gradient to input gradients.
"""
import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class UsageError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Run reverse accumulation from this tensor.

        ``grad`` defaults to ones for scalar outputs. Leaf tensors keep their
        gradients; intermediate buffers are released once consumed.
        """
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that was not recorded; run the forward with gradients enabled")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise UsageError(f"upstream gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None:
                continue
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            # interior nodes do not keep gradients
            node.grad = None
            node._backward = None
            node._parents = ()

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


class Parameter(Tensor):
    """Leaf tensor owned by a module; ``grad`` is a zero buffer of the same shape."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        raise UsageError("parameters are leaves; call backward() on a computed tensor")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data, parents, backward):
    """Wrap ``data`` as an op output; records the edge only when needed."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def finite_diff_check(f, x, eps=1e-4, analytic=None):
    """Largest relative error between an analytic gradient and central differences.

    ``f`` maps a float64 array to a scalar tensor (or float). The analytic
    gradient is obtained by back-propagating through ``f`` unless ``analytic``
    is given. Per-entry errors use ``max(|a|, |n|, floor)`` as denominator,
    where ``floor = 1e-6 * max(1, max|n|)`` keeps entries that are tiny
    relative to the gradient scale from dominating.
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        xt = Tensor(x.copy(), requires_grad=True)
        out = f(xt)
        out.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = numeric_grad(f, x, eps)
    floor = 1e-6 * max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def numeric_grad(f, x, eps=1e-4):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = _scalar(f(Tensor(x.copy())))
            flat[i] = old - eps
            fm = _scalar(f(Tensor(x.copy())))
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def _scalar(v):
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).sum())

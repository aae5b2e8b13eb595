"""Numba switch.

Set ``VIPTR_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba is
missing the numpy path is used as well. Numba itself is imported on the first
kernel call, so commands that never run a kernel do not pay for the import.
"""
import importlib.util
import os

_disabled = os.environ.get("VIPTR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

HAVE_NUMBA = not _disabled and importlib.util.find_spec("numba") is not None


class _LazyJit:
    """Compile ``fn`` with ``numba.njit`` on first call."""

    def __init__(self, fn, options):
        self.fn, self.options, self.compiled = fn, options, None
        self.__name__ = fn.__name__
        self.__doc__ = fn.__doc__

    def dispatcher(self):
        if self.compiled is None:
            import numba

            # jitted helpers called from this kernel must be numba objects by now
            g = self.fn.__globals__
            for name in self.fn.__code__.co_names:
                if isinstance(g.get(name), _LazyJit):
                    g[name] = g[name].dispatcher()
            self.compiled = numba.njit(**self.options)(self.fn)
        return self.compiled

    def __call__(self, *args):
        return (self.compiled or self.dispatcher())(*args)


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; returns the plain function without numba."""
    kwargs.setdefault("cache", True)

    def wrap(fn):
        return _LazyJit(fn, kwargs) if HAVE_NUMBA else fn

    if args and callable(args[0]):
        return wrap(args[0])
    return wrap

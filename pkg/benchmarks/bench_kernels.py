"""Compare the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]

Both paths live side by side in ``viptr.kernels`` so one process can time
both. Each line reports the median time of each path, the speed-up and the
largest absolute difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np

from viptr import kernels
from viptr._accel import HAVE_NUMBA


def timeit(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    finite = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[finite] - b[finite]))) if finite.any() else 0.0


def cases(rng):
    x = rng.standard_normal((32, 8, 24, 64)).astype(np.float32)
    w = rng.standard_normal((3, 3, 64)).astype(np.float32)
    g = rng.standard_normal((32, 8, 24, 64)).astype(np.float32)
    xc = rng.standard_normal((32, 32, 16, 48)).astype(np.float32)
    cols = rng.standard_normal((32, 8 * 48, 32 * 9)).astype(np.float32)
    lp = rng.standard_normal((24, 11))
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    ext = kernels.extend_with_blanks(np.array([1, 2, 2, 3, 4]), 0)
    yield ("dwconv 3x3 fwd [32,8,24,64]", lambda: kernels.dwconv_nhwc_np(x, w, 1, 1, 1, 1),
           lambda: kernels.dwconv_nhwc_nb(x, w, 1, 1, 1, 1))
    yield ("dwconv 3x3 bwd [32,8,24,64]", lambda: kernels.dwconv_nhwc_backward_np(x, w, g, 1, 1, 1, 1),
           lambda: kernels.dwconv_nhwc_backward_nb(x, w, g, 1, 1, 1, 1))
    yield ("im2col 3x3 s(2,1) [32,32,16,48]", lambda: kernels.im2col_np(xc, 3, 3, 2, 1, 1, 1),
           lambda: kernels.im2col_nb(xc, 3, 3, 2, 1, 1, 1))
    yield ("col2im 3x3 s(2,1) [32,32,16,48]",
           lambda: kernels.col2im_np(cols, xc.shape, 3, 3, 2, 1, 1, 1),
           lambda: kernels.col2im_nb(cols, xc.shape, 3, 3, 2, 1, 1, 1))
    yield ("ctc alpha/beta T=24 L=5", lambda: kernels.ctc_alpha_beta_np(lp, ext, 0),
           lambda: kernels.ctc_alpha_beta_nb(lp, ext, 0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba disabled or missing: the *_nb functions run as plain Python loops")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s} {'max |diff|':>11s}")
    for name, f_np, f_nb in cases(rng):
        t_np, t_nb = timeit(f_np, a.repeat), timeit(f_nb, a.repeat)
        print(f"{name:36s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}x "
              f"{max_diff(f_np(), f_nb()):11.2e}")


if __name__ == "__main__":
    main()

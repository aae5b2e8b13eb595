import os
import subprocess
import sys

import numpy as np
import pytest

from viptr import kernels
from viptr._accel import HAVE_NUMBA


@pytest.mark.parametrize("stride,pad,k", [((1, 1), (1, 1), 3), ((2, 1), (1, 1), 3), ((2, 2), (1, 1), 3),
                                          ((2, 2), (0, 0), 1), ((1, 2), (2, 2), 5)])
def test_dwconv_paths_agree(stride, pad, k):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 7, 3))
    w = rng.normal(size=(k, k, 3))
    a = kernels.dwconv_nhwc_np(x, w, *stride, *pad)
    b = kernels.dwconv_nhwc_nb(x, w, *stride, *pad)
    np.testing.assert_allclose(a, b, atol=1e-12)
    g = rng.normal(size=a.shape)
    for u, v in zip(kernels.dwconv_nhwc_backward_np(x, w, g, *stride, *pad),
                    kernels.dwconv_nhwc_backward_nb(x, w, g, *stride, *pad)):
        np.testing.assert_allclose(u, v, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (0, 0))])
def test_im2col_col2im_paths_agree(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 7))
    a = kernels.im2col_np(x, 3, 3, *stride, *pad)
    np.testing.assert_allclose(a, kernels.im2col_nb(x, 3, 3, *stride, *pad), atol=1e-12)
    cols = rng.normal(size=a.shape)
    np.testing.assert_allclose(kernels.col2im_np(cols, x.shape, 3, 3, *stride, *pad),
                               kernels.col2im_nb(cols, x.shape, 3, 3, *stride, *pad), atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 6))
    cols = kernels.im2col(x, 3, 3, 2, 1, 1, 1)
    c = rng.normal(size=cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * kernels.col2im(c, x.shape, 3, 3, 2, 1, 1, 1)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_ctc_recursions_agree():
    rng = np.random.default_rng(4)
    for _ in range(20):
        T, N = rng.integers(1, 9), rng.integers(2, 6)
        lp = rng.normal(size=(T, N))
        ext = kernels.extend_with_blanks(rng.integers(1, N, rng.integers(0, 4)), 0)
        for u, v in zip(kernels.ctc_alpha_beta_np(lp, ext, 0), kernels.ctc_alpha_beta_nb(lp, ext, 0)):
            np.testing.assert_allclose(u, v, atol=1e-12)


def test_extend_with_blanks():
    np.testing.assert_array_equal(kernels.extend_with_blanks(np.array([3, 3]), 0), [0, 3, 0, 3, 0])


def test_backend_flag_selects_numpy_path():
    code = ("import viptr.kernels as k, viptr._accel as a;"
            "print(k.BACKEND, a.HAVE_NUMBA, k.im2col is k.im2col_np)")
    env = dict(os.environ, VIPTR_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False", "True"]


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not available")
def test_default_backend_is_numba():
    assert kernels.BACKEND == "numba"
    assert kernels.im2col is kernels.im2col_nb


def test_forward_identical_under_both_backends(tmp_path):
    code = ("import numpy as np, viptr;"
            "m = viptr.build_model('sviptr-v2-t', seed=1); m.eval();"
            "x = np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 64)).astype(np.float32);"
            "np.save(r'%s', m.logits(x).data)")
    outs = []
    for flag in ("0", "1"):
        path = tmp_path / f"out{flag}.npy"
        env = dict(os.environ, VIPTR_DISABLE_NUMBA=flag)
        subprocess.run([sys.executable, "-c", code % path], env=env, check=True)
        outs.append(np.load(path))
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-4, atol=1e-5)

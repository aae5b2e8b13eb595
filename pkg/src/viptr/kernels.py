"""Hot inner loops: depthwise convolution, im2col/col2im and the CTC recursions.

Every kernel exists twice: a numba loop nest (``*_nb``) and a vectorised numpy
version (``*_np``). The public name binds to the numba one unless numba is
unavailable or disabled through ``VIPTR_DISABLE_NUMBA``.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

NEG_INF = -np.inf


def conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# depthwise convolution, channels-last
# ---------------------------------------------------------------------------

def dwconv_nhwc_np(x, w, sh, sw, ph, pw):
    B, H, W, C = x.shape
    kh, kw, _ = w.shape
    Ho = conv_out_size(H, kh, sh, ph)
    Wo = conv_out_size(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((B, Ho, Wo, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :] * w[i, j]
    return out


def dwconv_nhwc_backward_np(x, w, gout, sh, sw, ph, pw):
    B, H, W, C = x.shape
    kh, kw, _ = w.shape
    _, Ho, Wo, _ = gout.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + sh * (Ho - 1) + 1, sh), slice(j, j + sw * (Wo - 1) + 1, sw))
            gw[i, j] = np.einsum("bhwc,bhwc->c", xp[sl], gout)
            gxp[sl] += gout * w[i, j]
    return gxp[:, ph:ph + H, pw:pw + W, :], gw


@njit(fastmath=False)
def dwconv_nhwc_nb(x, w, sh, sw, ph, pw):
    B, H, W, C = x.shape
    kh, kw, _ = w.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, Ho, Wo, C), dtype=x.dtype)
    for b in range(B):
        for oh in range(Ho):
            for i in range(kh):
                ih = oh * sh + i - ph
                if ih < 0 or ih >= H:
                    continue
                for ow in range(Wo):
                    for j in range(kw):
                        iw = ow * sw + j - pw
                        if iw < 0 or iw >= W:
                            continue
                        for c in range(C):
                            out[b, oh, ow, c] += x[b, ih, iw, c] * w[i, j, c]
    return out


@njit(fastmath=False)
def dwconv_nhwc_backward_nb(x, w, gout, sh, sw, ph, pw):
    B, H, W, C = x.shape
    kh, kw, _ = w.shape
    _, Ho, Wo, _ = gout.shape
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for b in range(B):
        for oh in range(Ho):
            for i in range(kh):
                ih = oh * sh + i - ph
                if ih < 0 or ih >= H:
                    continue
                for ow in range(Wo):
                    for j in range(kw):
                        iw = ow * sw + j - pw
                        if iw < 0 or iw >= W:
                            continue
                        for c in range(C):
                            g = gout[b, oh, ow, c]
                            gw[i, j, c] += x[b, ih, iw, c] * g
                            gx[b, ih, iw, c] += w[i, j, c] * g
    return gx, gw


# ---------------------------------------------------------------------------
# im2col / col2im, NCHW input, columns laid out (B, Ho*Wo, C*kh*kw)
# ---------------------------------------------------------------------------

def im2col_np(x, kh, kw, sh, sw, ph, pw):
    B, C, H, W = x.shape
    Ho = conv_out_size(H, kh, sh, ph)
    Wo = conv_out_size(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :Ho, :Wo]  # B,C,Ho,Wo,kh,kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * kh * kw)


def col2im_np(cols, shape, kh, kw, sh, sw, ph, pw):
    B, C, H, W = shape
    Ho = conv_out_size(H, kh, sh, ph)
    Wo = conv_out_size(W, kw, sw, pw)
    c6 = cols.reshape(B, Ho, Wo, C, kh, kw)
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, ph:ph + H, pw:pw + W]


@njit
def im2col_nb(x, kh, kw, sh, sw, ph, pw):
    B, C, H, W = x.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    cols = np.zeros((B, Ho * Wo, C * kh * kw), dtype=x.dtype)
    for b in range(B):
        for oh in range(Ho):
            for ow in range(Wo):
                r = oh * Wo + ow
                for c in range(C):
                    for i in range(kh):
                        ih = oh * sh + i - ph
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = ow * sw + j - pw
                            if iw < 0 or iw >= W:
                                continue
                            cols[b, r, (c * kh + i) * kw + j] = x[b, c, ih, iw]
    return cols


@njit
def _col2im_nb(cols, B, C, H, W, kh, kw, sh, sw, ph, pw):
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    x = np.zeros((B, C, H, W), dtype=cols.dtype)
    for b in range(B):
        for oh in range(Ho):
            for ow in range(Wo):
                r = oh * Wo + ow
                for c in range(C):
                    for i in range(kh):
                        ih = oh * sh + i - ph
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = ow * sw + j - pw
                            if iw < 0 or iw >= W:
                                continue
                            x[b, c, ih, iw] += cols[b, r, (c * kh + i) * kw + j]
    return x


def col2im_nb(cols, shape, kh, kw, sh, sw, ph, pw):
    B, C, H, W = shape
    return _col2im_nb(np.ascontiguousarray(cols), B, C, H, W, kh, kw, sh, sw, ph, pw)


# ---------------------------------------------------------------------------
# CTC forward/backward recursions in log space
# ---------------------------------------------------------------------------

def extend_with_blanks(target, blank=0):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext, blank):
    # s may be reached from s-2 when ext[s] is a label differing from ext[s-2]
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def ctc_alpha_beta_np(log_probs, ext, blank=0):
    T = log_probs.shape[0]
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]  # T,S
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate(([NEG_INF], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + lp[t]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [NEG_INF]))
        b2 = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + lp[t]
    return alpha, beta


@njit
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit
def ctc_alpha_beta_nb(log_probs, ext, blank=0):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            v = alpha[t - 1, s]
            if s >= 1:
                v = _lae(v, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                v = _lae(v, alpha[t - 1, s - 2])
            if v != -np.inf:
                alpha[t, s] = v + log_probs[t, ext[s]]
    beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            v = beta[t + 1, s]
            if s + 1 < S:
                v = _lae(v, beta[t + 1, s + 1])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                v = _lae(v, beta[t + 1, s + 2])
            if v != -np.inf:
                beta[t, s] = v + log_probs[t, ext[s]]
    return alpha, beta


if HAVE_NUMBA:
    dwconv_nhwc = dwconv_nhwc_nb
    dwconv_nhwc_backward = dwconv_nhwc_backward_nb
    im2col = im2col_nb
    col2im = col2im_nb
    ctc_alpha_beta = ctc_alpha_beta_nb
else:
    dwconv_nhwc = dwconv_nhwc_np
    dwconv_nhwc_backward = dwconv_nhwc_backward_np
    im2col = im2col_np
    col2im = col2im_np
    ctc_alpha_beta = ctc_alpha_beta_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"

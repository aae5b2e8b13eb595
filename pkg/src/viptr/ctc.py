"""CTC head, greedy transcription, forward-backward loss and its brute-force oracle."""
import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels, ops
from .tensor import make_result

BLANK = 0
ENGLISH = "0123456789abcdefghijklmnopqrstuvwxyz"


class CTCInfeasible(ValueError):
    """The target cannot be aligned to the available time steps (loss is infinite)."""


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        if not self.symbols:
            raise ValueError("alphabet needs at least one symbol")
        object.__setattr__(self, "_index", {s: i + 1 for i, s in enumerate(self.symbols)})

    @classmethod
    def from_string(cls, chars):
        return cls(tuple(chars))

    @classmethod
    def english(cls):
        """36 case-folded symbols + blank = 37 classes."""
        return cls(tuple(ENGLISH))

    @classmethod
    def from_file(cls, path):
        """One symbol per line (UTF-8); line order gives indices 1..N-1."""
        with open(path, encoding="utf-8") as f:
            lines = [ln.rstrip("\n").rstrip("\r") for ln in f]
        return cls(tuple(ln for ln in lines if ln != ""))

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("".join(s + "\n" for s in self.symbols))

    @property
    def size(self):
        return len(self.symbols) + 1

    def _fold(self, text):
        if not any(s != s.lower() for s in self.symbols):
            return text.lower()
        return text

    def encode(self, text):
        text = self._fold(text)
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} is not in the alphabet") from None

    def decode(self, indices):
        return "".join(self.symbols[i - 1] for i in indices if i != BLANK)


def head_logits(features, head):
    """Per-position scores ``[B, T, N]`` from backbone features ``[B, C3, 1, T]``."""
    B, C, _, T = features.shape
    return head(features.reshape(B, C, T).transpose(0, 2, 1))


def collapse(path):
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits, alphabet):
    """Argmax path, collapsed. ``[T, N]`` gives a string, ``[B, T, N]`` a list."""
    arr = logits.data if hasattr(logits, "data") and not isinstance(logits, np.ndarray) else np.asarray(logits)
    if arr.ndim == 2:
        return alphabet.decode(collapse(arr.argmax(axis=-1)))
    return [alphabet.decode(collapse(row)) for row in arr.argmax(axis=-1)]


def ctc_loss(log_probs, target):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is ``[T, N]``; entries are treated as free inputs (the
    gradient does not assume they are normalised).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = kernels.extend_with_blanks(np.asarray(target, dtype=np.int64), BLANK)
    alpha, beta = kernels.ctc_alpha_beta(np.ascontiguousarray(lp), ext, BLANK)
    S = len(ext)
    logp = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, S - 1]
    if not np.isfinite(logp):
        raise CTCInfeasible(f"target of length {len(target)} cannot be aligned to {T} steps")
    occ = np.exp(alpha + beta - lp[:, ext] - logp)  # T, S
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-logp), grad


def ctc_brute_force(log_probs, target, max_paths=200_000):
    """Exact loss by enumerating every length-T path (small instances only)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, N = lp.shape
    if N ** T > max_paths:
        raise ValueError(f"{N}^{T} paths is too many to enumerate")
    target = [int(t) for t in target]
    total = -np.inf
    for path in itertools.product(range(N), repeat=T):
        if collapse(path) == target:
            total = np.logaddexp(total, lp[np.arange(T), path].sum())
    return float(-total)


def ctc_loss_batch(logits, targets):
    """Mean CTC loss over the batch; differentiable w.r.t. ``logits[B, T, N]``."""
    logp = ops.log_softmax(logits)
    B = logits.shape[0]
    losses, grads = np.zeros(B), np.zeros(logp.shape, dtype=np.float64)
    for b in range(B):
        losses[b], grads[b] = ctc_loss(logp.data[b], targets[b])
    grads /= B
    g_cast = grads.astype(logp.dtype)

    def backward(g):
        logp._accumulate(g_cast * g)

    return make_result(np.asarray(losses.mean(), dtype=logp.dtype), (logp,), backward)

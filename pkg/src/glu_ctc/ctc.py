"""Connectionist temporal classification on a blank-extended trellis.

All functions take a ``T x N`` grid with one row per frame and one column
per output token.  Unless ``blank`` is given, the last column is the blank,
which matches the token layout of :class:`glu_ctc.labels.ClassTable`.

Forward and backward variables are kept in log space.  ``betas`` include the
emission of their own frame, so ``alphas[t] + betas[t] - log y[t, ext]``
sums (in probability) to the total path probability at every ``t``.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import TooLargeError

BRUTE_FORCE_LIMIT = 10**6


def _blank_id(n_tokens, blank):
    return n_tokens - 1 if blank is None else int(blank)


def extend_with_blanks(target, blank):
    """Interleave ``blank`` around every label: ``l -> [-, l1, -, l2, ..., -]``."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def collapse(path, blank):
    """Merge runs of identical ids, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def min_frames(target):
    """Fewest frames that can emit ``target`` (repeats need a blank between)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _skip_mask(ext, blank):
    # s may be entered from s-2 only when skipping a blank between distinct labels
    skip = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


@dataclass
class Trellis:
    extended: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    log_total: float
    feasible: bool = True

    @property
    def loss(self):
        return -self.log_total


def _forward_backward(logp, ext, blank):
    n_frames = logp.shape[0]
    n_states = len(ext)
    skip = _skip_mask(ext, blank)
    emit = logp[:, ext]

    alphas = np.full((n_frames, n_states), -np.inf)
    alphas[0, 0] = emit[0, 0]
    if n_states > 1:
        alphas[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alphas[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[skip] = np.logaddexp(acc[skip], prev[np.flatnonzero(skip) - 2])
        alphas[t] = acc + emit[t]

    betas = np.full((n_frames, n_states), -np.inf)
    betas[-1, -1] = emit[-1, -1]
    if n_states > 1:
        betas[-1, -2] = emit[-1, -2]
    skip_from = np.flatnonzero(skip) - 2
    for t in range(n_frames - 2, -1, -1):
        nxt = betas[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[skip_from] = np.logaddexp(acc[skip_from], nxt[skip_from + 2])
        betas[t] = acc + emit[t]

    if n_states > 1:
        log_total = float(np.logaddexp(alphas[-1, -1], alphas[-1, -2]))
    else:
        log_total = float(alphas[-1, -1])
    return alphas, betas, log_total


def ctc_log_prob(probs, target, blank=None):
    """Log of the summed probability of every path that collapses to ``target``.

    Parameters
    ----------
    probs : array_like, shape (T, N)
        Per-frame token probabilities; rows sum to one.
    target : sequence of int
        Label ids, no blanks.
    blank : int, optional
        Blank id, defaults to ``N - 1``.

    Returns
    -------
    Trellis
        ``feasible`` is False (and ``log_total`` is ``-inf``) when ``target``
        needs more frames than ``probs`` has.
    """
    probs = np.asarray(probs, dtype=np.float64)
    blank = _blank_id(probs.shape[1], blank)
    ext = extend_with_blanks(target, blank)
    if min_frames(target) > probs.shape[0]:
        empty = np.full((probs.shape[0], len(ext)), -np.inf)
        return Trellis(ext, empty, empty.copy(), -np.inf, feasible=False)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    alphas, betas, log_total = _forward_backward(logp, ext, blank)
    return Trellis(ext, alphas, betas, log_total, feasible=bool(np.isfinite(log_total)))


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def state_occupancy(trellis, logp):
    """Posterior mass per frame and token, summed over trellis states."""
    ext = trellis.extended
    emit = logp[:, ext]
    with np.errstate(invalid="ignore"):
        log_gamma = trellis.alphas + trellis.betas - emit - trellis.log_total
    log_gamma[np.isneginf(emit)] = -np.inf
    occupancy = np.zeros_like(logp)
    np.add.at(occupancy.T, ext, np.exp(log_gamma).T)
    return occupancy


def ctc_loss_grad(logits, target, blank=None):
    """CTC loss and its gradient with respect to the pre-softmax ``logits``.

    Returns ``(inf, zeros)`` for a target that cannot fit in ``T`` frames.
    """
    logits = np.asarray(logits, dtype=np.float64)
    blank = _blank_id(logits.shape[1], blank)
    if min_frames(target) > logits.shape[0]:
        return np.inf, np.zeros_like(logits)
    logp = log_softmax(logits)
    ext = extend_with_blanks(target, blank)
    alphas, betas, log_total = _forward_backward(logp, ext, blank)
    trellis = Trellis(ext, alphas, betas, log_total)
    grad = np.exp(logp) - state_occupancy(trellis, logp)
    return -log_total, grad


def best_path_decode(probs, blank=None):
    """Per-frame argmax (lowest id wins ties) followed by :func:`collapse`."""
    probs = np.asarray(probs)
    blank = _blank_id(probs.shape[1], blank)
    return collapse(np.argmax(probs, axis=1), blank)


def brute_force_total_prob(probs, target, blank=None):
    """Sum path probabilities by enumerating all ``N**T`` paths.

    Only meant as an independent check on :func:`ctc_log_prob`.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n_frames, n_tokens = probs.shape
    if n_tokens**n_frames > BRUTE_FORCE_LIMIT:
        raise TooLargeError(f"{n_tokens}**{n_frames} paths exceeds {BRUTE_FORCE_LIMIT}")
    blank = _blank_id(n_tokens, blank)
    target = [int(t) for t in target]
    rows = probs.tolist()
    total = 0.0
    for path in itertools.product(range(n_tokens), repeat=n_frames):
        if collapse(path, blank) == target:
            total += math.prod(row[k] for row, k in zip(rows, path))
    return total

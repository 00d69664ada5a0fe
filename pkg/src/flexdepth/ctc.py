"""CTC loss (log-space forward algorithm), greedy decoding, and edit-distance
scoring. Blank index is fixed at 0; label symbols live in [1, V).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor

NEG_INF = -np.inf
BLANK = 0


def extend_with_blanks(labels: Sequence[int]) -> np.ndarray:
    """Interleave blanks: [a, b] -> [_, a, _, b, _] (length 2S+1)."""
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels: Sequence[int]) -> int:
    """Shortest alignable frame count: S plus one blank per adjacent repeat."""
    reps = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + reps


@dataclass
class CtcLattice:
    extended: np.ndarray      # blank-interleaved labels, length 2S+1
    log_alpha: np.ndarray     # [T, 2S+1] forward table

    @property
    def log_prob(self) -> float:
        tail = self.log_alpha[-1, -2:]
        return float(np.logaddexp(tail[0], tail[1])) if tail.size == 2 \
            else float(tail[-1])


def _forward_table(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    T = logp.shape[0]
    S = ext.size
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    # transitions: stay, step, and skip over a blank between distinct symbols
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(can_skip[2:],
                           np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logp[t, ext]
    return alpha


def _backward_table(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    T = logp.shape[0]
    S = ext.size
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, -1] = 0.0
    if S > 1:
        beta[T - 1, -2] = 0.0
    can_skip = np.zeros(S, dtype=bool)
    can_skip[:-2] = (ext[:-2] != BLANK) & (ext[:-2] != ext[2:])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(can_skip[:-2],
                            np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def ctc_lattice(logp: np.ndarray, labels: Sequence[int]) -> CtcLattice:
    logp = np.asarray(logp, dtype=np.float64)
    ext = extend_with_blanks(labels)
    return CtcLattice(ext, _forward_table(logp, ext))


def _nll_and_grad(logp: np.ndarray, labels: Sequence[int]
                  ) -> tuple[float, np.ndarray | None]:
    """Negative log-likelihood and its gradient w.r.t. the log-probs."""
    T, V = logp.shape
    if any(not 0 < sym < V for sym in labels):
        raise ValueError(f"labels must lie in [1, {V}), got {list(labels)}")
    if T < min_frames(labels):
        return np.inf, None
    ext = extend_with_blanks(labels)
    alpha = _forward_table(logp, ext)
    beta = _backward_table(logp, ext)
    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if ext.size > 1 \
        else alpha[-1, -1]
    if not np.isfinite(log_p):
        return np.inf, None
    # posterior mass of lattice states mapped back onto vocabulary cells
    occ = np.exp(alpha + beta - log_p)        # [T, 2S+1]
    grad = np.zeros_like(logp)
    for s, sym in enumerate(ext):
        grad[:, sym] -= occ[:, s]
    return float(-log_p), grad


@dataclass
class CtcBatchLoss:
    loss: Tensor                 # mean NLL over alignable utterances
    per_utterance: np.ndarray    # NLL per utterance, inf where skipped
    skipped: list[int]           # indices of unalignable utterances


def ctc_loss_batch(logp: Tensor, lengths: Sequence[int],
                   labels: Sequence[Sequence[int]]) -> CtcBatchLoss:
    """Mean CTC loss over a padded batch of log-prob tensors [B, T, V].

    Utterances whose frame budget cannot host the label sequence get an
    infinite loss and are excluded from the mean (reported in `skipped`).
    """
    lp = logp.values
    if lp.ndim != 3:
        raise ShapeError(f"ctc_loss: expected [B, T, V] log-probs, got {logp.shape}")
    B = lp.shape[0]
    if not (len(lengths) == len(labels) == B):
        raise ShapeError(
            f"ctc_loss: batch size mismatch: {B} log-prob rows, "
            f"{len(lengths)} lengths, {len(labels)} label sequences")
    per = np.empty(B)
    grads: list[np.ndarray | None] = []
    skipped = []
    for i in range(B):
        nll, g = _nll_and_grad(lp[i, :lengths[i]], labels[i])
        per[i] = nll
        grads.append(g)
        if g is None:
            skipped.append(i)
    used = B - len(skipped)
    mean_loss = per[np.isfinite(per)].mean() if used else 0.0

    def back(g_out):
        dx = np.zeros_like(lp)
        if used:
            w = g_out / used
            for i, g in enumerate(grads):
                if g is not None:
                    dx[i, :lengths[i]] = w * g
        return (dx,)

    loss = logp.tape.record("ctc_loss", (logp,), np.float64(mean_loss), back)
    return CtcBatchLoss(loss, per, skipped)


def ctc_loss(logp: Tensor, labels: Sequence[int]) -> Tensor:
    """CTC loss of a single [T, V] log-prob tensor."""
    if logp.values.ndim != 2:
        raise ShapeError(f"ctc_loss: expected [T, V] log-probs, got {logp.shape}")
    lp = logp.values
    nll, grad = _nll_and_grad(lp, labels)

    def back(g_out):
        if grad is None:
            return (np.zeros_like(lp),)
        return (g_out * grad,)

    return logp.tape.record("ctc_loss", (logp,), np.float64(nll), back)


def greedy_decode(logp: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, strip blanks."""
    path = np.argmax(logp, axis=-1)
    out = []
    prev = -1
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return out


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def label_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    if len(ref) == 0:
        raise ValueError("label_error_rate: reference must be non-empty")
    return levenshtein(hyp, ref) / len(ref)


def corpus_label_error_rate(hyps: Sequence[Sequence[int]],
                            refs: Sequence[Sequence[int]]) -> float:
    """Total edit distance over total reference length, as a fraction."""
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("corpus_label_error_rate: empty references")
    total_edit = sum(levenshtein(h, r) for h, r in zip(hyps, refs))
    return total_edit / total_ref

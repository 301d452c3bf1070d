"""CTC output head: projection, loss, decoding and error rates."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .core import functional as F
from .core.layers import Linear, Module
from .core.tensor import Tensor
from .errors import LengthMismatch, ShapeMismatch, TargetTooLong
from .vocab import BLANK_ID, DEFAULT_VOCAB, CtcVocab

NEG_INF = -np.inf


class CtcHead(Module):
    def __init__(self, rng, d_model: int, n_classes: int = DEFAULT_VOCAB.size):
        self.proj = Linear(rng, d_model, n_classes)


def project_logits(c: Tensor, head: CtcHead) -> Tensor:
    """Per-frame log-probabilities over blank + characters."""
    if c.shape[-1] != head.proj.w.shape[0]:
        raise ShapeMismatch(f"context width {c.shape[-1]} != head input {head.proj.w.shape[0]}")
    return F.log_softmax(head.proj(c), axis=-1)


def min_frames(target) -> int:
    """Fewest frames that can emit ``target`` (repeats need a blank between)."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _lse(a, b):
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = m + np.log(np.exp(a - m) + np.exp(b - m))
    return np.where(np.isneginf(m), NEG_INF, out)


def _ctc_lattice(lp: np.ndarray, target: np.ndarray):
    """Log-domain forward and backward variables over the blank-extended target."""
    T = lp.shape[0]
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    # s-2 skip allowed onto a label that differs from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    em = lp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lse(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + em[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = em[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = em[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], _lse(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + em[t]
    log_p = alpha[T - 1, S - 1] if S == 1 else _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return ext, alpha, beta, float(log_p)


def ctc_nll(log_probs: Tensor, target) -> Tensor:
    """-log of the total probability of all alignments that collapse to ``target``."""
    target = np.asarray(list(target), dtype=np.int64)
    T, V = log_probs.shape
    if np.any(target == BLANK_ID) or (target.size and (target.min() < 0 or target.max() >= V)):
        raise ValueError("target ids must be non-blank class indices")
    if min_frames(target) > T:
        raise TargetTooLong(f"target needs {min_frames(target)} frames, only {T} available")
    lp = log_probs.data.astype(np.float64)
    ext, alpha, beta, log_p = _ctc_lattice(lp, target)

    def back(g):
        # occupancy of each extended state, emission counted once
        gamma = alpha + beta - lp[:, ext]
        post = np.exp(gamma - log_p)
        grad = np.zeros_like(lp)
        for s, k in enumerate(ext):
            grad[:, k] -= post[:, s]
        return ((g * grad).astype(log_probs.dtype),)
    out = np.asarray(-log_p, dtype=log_probs.dtype)
    return Tensor.from_op(out, (log_probs,), back, "ctc_nll")


def collapse(ids) -> list[int]:
    out = []
    prev = None
    for i in ids:
        if i != prev and i != BLANK_ID:
            out.append(int(i))
        prev = i
    return out


def greedy_decode(log_probs, vocab: CtcVocab = DEFAULT_VOCAB) -> str:
    """Best-path decoding; ``argmax`` ties resolve to the lower class id."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if lp.shape[0] == 0:
        return ""
    return vocab.decode(collapse(np.argmax(lp, axis=-1)))


def beam_search(log_probs, width: int = 8) -> tuple[list[int], float]:
    """Prefix beam search without a language model.

    Each prefix carries the log-probability of the paths ending in blank and
    in its last label; prefixes reached by different paths are merged.
    Returns the best label sequence and its exact log-probability; the
    greedy string is always among the final candidates.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    lp = lp.astype(np.float64)
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(lp.shape[0]):
        row = lp[t]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            slot = nxt[prefix]
            slot[0] = np.logaddexp(slot[0], total + row[BLANK_ID])
            for c in range(len(row)):
                if c == BLANK_ID:
                    continue
                p = row[c]
                ext = prefix + (c,)
                if prefix and prefix[-1] == c:
                    # repeated label only extends after a blank
                    nxt[ext][1] = np.logaddexp(nxt[ext][1], pb + p)
                    slot[1] = np.logaddexp(slot[1], pnb + p)
                else:
                    nxt[ext][1] = np.logaddexp(nxt[ext][1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:width]}
    # pruned scores are lower bounds; rescore survivors and the greedy string exactly
    candidates = set(beams) | {tuple(collapse(np.argmax(lp, axis=-1)))}
    scored = [(sequence_log_prob(lp, c), tuple(-i for i in c), c) for c in candidates]
    score, _, best = max(scored)
    return list(best), score


def sequence_log_prob(lp: np.ndarray, target) -> float:
    """Exact log-probability of ``target`` summed over all alignments."""
    target = np.asarray(list(target), dtype=np.int64)
    if min_frames(target) > lp.shape[0]:
        return float(NEG_INF)
    return _ctc_lattice(np.asarray(lp, dtype=np.float64), target)[3]


def beam_decode(log_probs, vocab: CtcVocab = DEFAULT_VOCAB, width: int = 8) -> str:
    """Text of the most probable prefix found by :func:`beam_search`.

    With ``width=1`` this is not guaranteed to match greedy decoding, since
    the single kept prefix already merges several alignments.
    """
    ids, _ = beam_search(log_probs, width)
    return vocab.decode(ids)


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev_diag, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (x != y))
            prev_diag, row[j] = row[j], cur
    return row[-1]


def error_rate(errors: int, total: int) -> float:
    if total == 0:
        return 0.0 if errors == 0 else 1.0
    return errors / total


def edit_distance_rates(refs, hyps) -> tuple[float, float]:
    """Corpus-level (WER, CER): summed edit distances over summed reference lengths."""
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} references vs {len(hyps)} hypotheses")
    we = wn = ce = cn = 0
    for r, h in zip(refs, hyps):
        rw = r.split()
        we += levenshtein(rw, h.split())
        wn += len(rw)
        ce += levenshtein(r, h)
        cn += len(r)
    return error_rate(we, wn), error_rate(ce, cn)


def cer(ref: str, hyp: str) -> float:
    return error_rate(levenshtein(ref, hyp), len(ref))

"""Linear-chain CRF over BIO tags, plus entity extraction and scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core.tensor import Tensor
from ..errors import InvalidTag, LengthMismatch, ShapeMismatch

ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC", "PRODUCT", "ORDER_ID")


class TagSet:
    """O plus B-/I- for each entity type. START and END exist only as
    rows/columns of the transition table (indices K and K+1)."""

    def __init__(self, types=ENTITY_TYPES):
        self.types = tuple(types)
        self.labels = ["O"] + [f"{p}-{t}" for t in self.types for p in ("B", "I")]
        self.index = {label: i for i, label in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    @property
    def start(self) -> int:
        return len(self.labels)

    @property
    def end(self) -> int:
        return len(self.labels) + 1

    def encode(self, tags) -> list[int]:
        try:
            return [self.index[t] for t in tags]
        except KeyError as exc:
            raise InvalidTag(f"unknown tag {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.labels[i] for i in ids]


DEFAULT_TAGS = TagSet()


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _check(em: np.ndarray, trans: np.ndarray):
    K = em.shape[-1]
    if trans.shape != (K + 2, K + 2):
        raise ShapeMismatch(f"transitions {trans.shape} do not fit {K} tags")
    if em.shape[-2] < 1:
        raise ValueError("CRF needs at least one frame")


def _forward(em: np.ndarray, trans: np.ndarray):
    """Batched log-domain forward/backward. em: [B, T, K]."""
    B, T, K = em.shape
    S, E = K, K + 1
    tr = trans[:K, :K]
    alpha = np.empty((B, T, K))
    alpha[:, 0] = trans[S, :K] + em[:, 0]
    for t in range(1, T):
        alpha[:, t] = _lse(alpha[:, t - 1, :, None] + tr, axis=1) + em[:, t]
    log_z = _lse(alpha[:, -1] + trans[:K, E], axis=1)
    beta = np.empty((B, T, K))
    beta[:, -1] = trans[:K, E]
    for t in range(T - 2, -1, -1):
        beta[:, t] = _lse(tr + (em[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    return alpha, beta, log_z


def path_score(em: np.ndarray, tags, trans: np.ndarray) -> float:
    """Unnormalized log-score of one tag path for emissions [T, K]."""
    tags = np.asarray(tags)
    K = em.shape[-1]
    s = trans[K, tags[0]] + em[np.arange(len(tags)), tags].sum() + trans[tags[-1], K + 1]
    s += trans[tags[:-1], tags[1:]].sum()
    return float(s)


def log_partition(emissions, transitions) -> float:
    em = np.asarray(getattr(emissions, "data", emissions), dtype=np.float64)
    trans = np.asarray(getattr(transitions, "data", transitions), dtype=np.float64)
    _check(em, trans)
    return float(_forward(em[None], trans)[2][0])


def crf_nll(emissions: Tensor, tags, transitions: Tensor) -> Tensor:
    """Mean over the batch of log Z - score(tags).

    ``emissions`` is [T, K] or [B, T, K]; ``tags`` matches without K.
    Gradients are the usual marginals-minus-counts, from forward-backward.
    """
    em = emissions.data.astype(np.float64)
    trans = transitions.data.astype(np.float64)
    _check(em, trans)
    single = em.ndim == 2
    if single:
        em = em[None]
    B, T, K = em.shape
    y = np.asarray(tags, dtype=np.int64).reshape(B, T)
    if y.min() < 0 or y.max() >= K:
        raise InvalidTag(f"tag ids must lie in [0, {K})")
    alpha, beta, log_z = _forward(em, trans)
    scores = np.array([path_score(em[b], y[b], trans) for b in range(B)])
    nll = (log_z - scores).mean()

    def back(g):
        scale = g / B
        S, E = K, K + 1
        unary = np.exp(alpha + beta - log_z[:, None, None])
        g_em = unary.copy()
        rows = np.arange(T)
        for b in range(B):
            g_em[b, rows, y[b]] -= 1.0
        g_tr = np.zeros_like(trans)
        if T > 1:
            pair = (alpha[:, :-1, :, None] + trans[:K, :K] + (em[:, 1:] + beta[:, 1:])[:, :, None, :]
                    - log_z[:, None, None, None])
            g_tr[:K, :K] = np.exp(pair).sum(axis=(0, 1))
        g_tr[S, :K] = unary[:, 0].sum(axis=0)
        g_tr[:K, E] = unary[:, -1].sum(axis=0)
        for b in range(B):
            np.add.at(g_tr, (y[b, :-1], y[b, 1:]), -1.0)
            g_tr[S, y[b, 0]] -= 1.0
            g_tr[y[b, -1], E] -= 1.0
        if single:
            g_em = g_em[0]
        return ((scale * g_em).astype(emissions.dtype), (scale * g_tr).astype(transitions.dtype))
    return Tensor.from_op(np.asarray(nll, dtype=emissions.dtype), (emissions, transitions), back, "crf_nll")


def viterbi(emissions, transitions) -> tuple[list[int], float]:
    """MAP tag path for emissions [T, K]; ties go to the lower label index."""
    em = np.asarray(getattr(emissions, "data", emissions), dtype=np.float64)
    trans = np.asarray(getattr(transitions, "data", transitions), dtype=np.float64)
    _check(em, trans)
    T, K = em.shape
    delta = trans[K, :K] + em[0]
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + trans[:K, :K]
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(K)] + em[t]
    final = delta + trans[:K, K + 1]
    best = int(np.argmax(final))
    path = [best]
    for t in range(T - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    path.reverse()
    return path, float(final[path[-1]])


@dataclass(frozen=True)
class Entity:
    type: str
    start: int
    end: int
    text: str = ""

    @property
    def key(self):
        return (self.type, self.start, self.end)


def decode_entities(tokens, tags) -> list[Entity]:
    """BIO spans to entities.

    An ``I-X`` that follows ``O`` or a different type opens a new ``X``
    entity instead of being rejected.
    """
    tokens, tags = list(tokens), list(tags)
    if len(tokens) != len(tags):
        raise LengthMismatch(f"{len(tokens)} tokens vs {len(tags)} tags")
    out = []
    cur_type, cur_start = None, 0

    def close(end):
        if cur_type is not None:
            out.append(Entity(cur_type, cur_start, end, " ".join(tokens[cur_start:end])))

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i)
            cur_type = None
            continue
        prefix, _, etype = tag.partition("-")
        if prefix not in ("B", "I") or not etype:
            raise InvalidTag(f"malformed tag {tag!r}")
        if prefix == "B" or etype != cur_type:
            close(i)
            cur_type, cur_start = etype, i
    close(len(tags))
    return out


def entities_to_tags(n_tokens: int, entities) -> list[str]:
    tags = ["O"] * n_tokens
    for e in entities:
        tags[e.start] = "B-" + e.type
        for k in range(e.start + 1, e.end):
            tags[k] = "I-" + e.type
    return tags


def f1_eval(pred, gold) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over per-utterance entity lists.

    Entities match on (type, start, end) exactly.
    """
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gold)} gold utterances")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        pk = {_key(e) for e in p}
        gk = {_key(e) for e in g}
        tp += len(pk & gk)
        n_pred += len(pk)
        n_gold += len(gk)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _key(e):
    if hasattr(e, "key"):
        return e.key
    if isinstance(e, dict):
        return (e["type"], e["start"], e["end"])
    return (e.type, e.start, e.end)

"""BERT-style tagger: embeddings, bidirectional encoder, BiLSTM, IDCNN-ELU, CRF."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..core import functional as F
from ..core.layers import LayerNorm, Linear, Module, TransformerBlock, normal_param, zeros_param
from ..core.optim import Adam
from ..core.tensor import Tensor, no_grad
from ..errors import EmptyCorpus, SequenceTooLong, ShapeMismatch, TagVocabMismatch
from .crf import DEFAULT_TAGS, TagSet, crf_nll, decode_entities, viterbi
from .tokenizer import CLS_ID, MASK_ID, SEP_ID, UNK_ID, TokenVocab

log = logging.getLogger(__name__)

IDCNN_DILATIONS = (1, 2, 4)


@dataclass
class NerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    lstm_hidden: int = 32
    max_len: int = 64
    use_bilstm: bool = True
    use_idcnn: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.lstm_hidden) <= 0 or self.n_layers < 0:
            raise ValueError("NER geometry must be positive")
        if self.max_len < 3:
            raise ValueError("max_len must leave room for [CLS] and [SEP]")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def feature_width(self) -> int:
        return 2 * self.lstm_hidden if self.use_bilstm else self.d_model


class LSTMCell(Module):
    """Gates packed as [input, forget, candidate, output]."""

    def __init__(self, rng, d_in: int, hidden: int):
        self.hidden = hidden
        self.wx = normal_param(rng, (d_in, 4 * hidden))
        self.wh = normal_param(rng, (hidden, 4 * hidden))
        self.b = zeros_param((4 * hidden,))
        self.b.data[hidden:2 * hidden] = 1.0

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        H = self.hidden
        z = F.add(F.add(F.matmul(x, self.wx), F.matmul(h, self.wh)), self.b)
        i = F.sigmoid(z[..., 0:H])
        f = F.sigmoid(z[..., H:2 * H])
        g = F.tanh(z[..., 2 * H:3 * H])
        o = F.sigmoid(z[..., 3 * H:4 * H])
        c = F.add(F.mul(f, c), F.mul(i, g))
        h = F.mul(o, F.tanh(c))
        return h, c


class BiLSTM(Module):
    def __init__(self, rng, d_in: int, hidden: int):
        self.fwd = LSTMCell(rng, d_in, hidden)
        self.bwd = LSTMCell(rng, d_in, hidden)


class IDCNN(Module):
    def __init__(self, rng, width: int, kernel: int = 3):
        self.kernels = [normal_param(rng, (width, width, kernel)) for _ in IDCNN_DILATIONS]


class NerModel(Module):
    def __init__(self, vocab: TokenVocab, cfg: NerConfig | None = None, tags: TagSet = DEFAULT_TAGS,
                 seed: int = 0):
        cfg = cfg or NerConfig()
        self.cfg = cfg
        self.vocab = vocab
        self.tags = tags
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.tok_emb = normal_param(rng, (len(vocab), d))
        self.pos_emb = normal_param(rng, (cfg.max_len, d))
        self.seg_emb = normal_param(rng, (2, d))
        self.emb_norm = LayerNorm(d)
        self.blocks = [TransformerBlock(rng, d, cfg.n_heads) for _ in range(cfg.n_layers)]
        self.mlm_head = Linear(rng, d, len(vocab))
        self.bilstm = BiLSTM(rng, d, cfg.lstm_hidden) if cfg.use_bilstm else None
        self.idcnn = IDCNN(rng, cfg.feature_width) if cfg.use_idcnn else None
        self.emission = Linear(rng, cfg.feature_width, len(tags))
        self.transitions = normal_param(rng, (len(tags) + 2, len(tags) + 2))

    def encoder_parameters(self):
        params = [self.tok_emb, self.pos_emb, self.seg_emb] + self.emb_norm.parameters()
        return params + [p for b in self.blocks for p in b.parameters()]


# -- layers as functions ------------------------------------------------------------

def embed_tokens(model: NerModel, ids, segment_ids=None, normalize: bool = True) -> Tensor:
    """Token + position + segment lookups summed, then layer-normed.

    ``ids`` is [T] or [B, T]."""
    ids = np.asarray(ids, dtype=np.int64)
    T = ids.shape[-1]
    if T > model.cfg.max_len:
        raise SequenceTooLong(f"{T} tokens exceed the maximum of {model.cfg.max_len}")
    seg = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != ids.shape or (seg.size and (seg.min() < 0 or seg.max() > 1)):
        raise ValueError("segment ids must be 0/1 and match the token ids")
    x = F.add(F.embedding(model.tok_emb, ids), F.embedding(model.pos_emb, np.arange(T)))
    x = F.add(x, F.embedding(model.seg_emb, seg))
    return model.emb_norm(x) if normalize else x


def encode_bidirectional(emb: Tensor, model: NerModel) -> Tensor:
    """Unmasked self-attention stack: every position sees both sides."""
    if emb.shape[-1] != model.cfg.d_model:
        raise ShapeMismatch(f"embedding width {emb.shape[-1]} != {model.cfg.d_model}")
    x = emb
    for block in model.blocks:
        x = block(x)
    return x


def bilstm_layer(h: Tensor, params: BiLSTM) -> Tensor:
    """[..., T, f] -> [..., T, 2*hidden]; forward and reversed passes concatenated."""
    if h.shape[-1] != params.fwd.wx.shape[0]:
        raise ShapeMismatch(f"LSTM input width {h.shape[-1]} != {params.fwd.wx.shape[0]}")
    if h.ndim == 2:
        return bilstm_layer(F.reshape(h, (1,) + h.shape), params)[0]
    T = h.shape[-2]
    H = params.fwd.hidden
    lead = h.shape[:-2]
    outs = {}
    for name, cell, order in (("f", params.fwd, range(T)), ("b", params.bwd, range(T - 1, -1, -1))):
        hs = Tensor(np.zeros(lead + (H,), dtype=h.dtype))
        cs = Tensor(np.zeros(lead + (H,), dtype=h.dtype))
        steps = {}
        for t in order:
            hs, cs = cell.step(h[..., t, :], hs, cs)
            steps[t] = hs
        outs[name] = F.stack([steps[t] for t in range(T)], axis=-2)
    return F.concat([outs["f"], outs["b"]], axis=-1)


def idcnn_elu(h: Tensor, params: IDCNN) -> Tensor:
    """Dilations 1, 2, 4 with ELU after each conv, plus a residual around the block."""
    x = F.swapaxes(h, -1, -2)
    y = x
    for kernel, d in zip(params.kernels, IDCNN_DILATIONS):
        y = F.elu(F.dilated_conv1d(y, kernel, dilation=d, strict=False))
    return F.swapaxes(F.add(y, x), -1, -2)


def emissions(features: Tensor, projection: Linear) -> Tensor:
    """Raw per-tag scores; the CRF normalizes them."""
    return projection(features)


def sequence_features(model: NerModel, ids) -> Tensor:
    """Token ids (without specials) -> features [..., T, f] for the CRF."""
    ids = np.asarray(ids, dtype=np.int64)
    lead = ids.shape[:-1]
    wrapped = np.concatenate([np.full(lead + (1,), CLS_ID), ids, np.full(lead + (1,), SEP_ID)], axis=-1)
    hidden = encode_bidirectional(embed_tokens(model, wrapped), model)
    h = hidden[..., 1:-1, :]
    if model.bilstm is not None:
        h = bilstm_layer(h, model.bilstm)
    if model.idcnn is not None:
        h = idcnn_elu(h, model.idcnn)
    return h


def tagger_loss(model: NerModel, ids, tag_ids) -> Tensor:
    em = emissions(sequence_features(model, ids), model.emission)
    return crf_nll(em, tag_ids, model.transitions)


def predict_tags(model: NerModel, tokens) -> list[str]:
    """Viterbi tags. Inputs longer than the position table are tagged in
    consecutive windows."""
    ids = model.vocab.encode(tokens)
    window = model.cfg.max_len - 2
    out = []
    for lo in range(0, len(ids), window):
        with no_grad():
            em = emissions(sequence_features(model, ids[lo:lo + window]), model.emission)
        path, _ = viterbi(em.data, model.transitions.data)
        out.extend(model.tags.decode(path))
    return out


def extract_entities(model: NerModel, tokens, surface=None):
    """Tag ``tokens`` and return entities whose text comes from ``surface``."""
    tags = predict_tags(model, tokens)
    return decode_entities(surface if surface is not None else tokens, tags)


# -- masked language model pretraining ----------------------------------------------

def mlm_mask(ids: np.ndarray, vocab_size: int, rng: np.random.Generator, rate: float = 0.15):
    """Choose ~15% of positions; 80% become MASK, 10% a random token, 10% stay."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    k = max(1, int(round(rate * n)))
    pos = np.sort(rng.choice(n, size=min(k, n), replace=False))
    corrupted = ids.copy()
    roll = rng.random(pos.size)
    rand_tok = rng.integers(5, vocab_size, size=pos.size) if vocab_size > 5 else np.full(pos.size, UNK_ID)
    corrupted[pos[roll < 0.8]] = MASK_ID
    swap = (roll >= 0.8) & (roll < 0.9)
    corrupted[pos[swap]] = rand_tok[swap]
    return corrupted, pos


def mlm_loss(model: NerModel, ids, rng) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Cross-entropy on the selected positions of one sentence (no specials)."""
    corrupted, pos = mlm_mask(ids, len(model.vocab), rng)
    wrapped = np.concatenate([[CLS_ID], corrupted, [SEP_ID]])
    hidden = encode_bidirectional(embed_tokens(model, wrapped), model)
    logits = model.mlm_head(F.index(hidden, pos + 1))
    return F.cross_entropy(logits, np.asarray(ids)[pos]), logits.data, pos


def _group_by_length(seqs, idx):
    groups: dict[int, list[int]] = {}
    for i in idx:
        groups.setdefault(len(seqs[i]), []).append(int(i))
    return [groups[k] for k in sorted(groups)]


def mlm_pretrain(corpus, model: NerModel, steps: int, seed: int, batch_size: int = 16,
                 lr: float = 1e-3, log_every: int = 0) -> list[float]:
    """Train the encoder and MLM head on token lists. Returns the loss history."""
    seqs = [model.vocab.encode(toks) for toks in corpus if toks]
    if not seqs:
        raise EmptyCorpus("MLM corpus has no tokens")
    rng = np.random.default_rng([seed, 2])
    params = model.encoder_parameters() + model.mlm_head.parameters()
    opt = Adam(params, lr=lr)
    history = []
    for step in range(1, steps + 1):
        batch = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        opt.zero_grad()
        losses = [mlm_loss(model, seqs[i], rng)[0] for i in batch]
        loss = F.mul(F.sum(F.stack(losses)), 1.0 / len(losses))
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("step=%d loss=%.6f", step, loss.item())
    return history


def mlm_accuracy(model: NerModel, corpus, seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    hit = total = 0
    with no_grad():
        for toks in corpus:
            if not toks:
                continue
            ids = np.asarray(model.vocab.encode(toks))
            _, logits, pos = mlm_loss(model, ids, rng)
            hit += int(np.sum(np.argmax(logits, axis=-1) == ids[pos]))
            total += pos.size
    return hit / max(total, 1)


# -- CRF training ---------------------------------------------------------------------

def train_ner(model: NerModel, corpus, steps: int, seed: int, batch_size: int = 16,
              lr: float = 1e-3, unk_rate: float = 0.0, log_every: int = 0) -> list[float]:
    """Minimize mean CRF NLL over (tokens, BIO tags) pairs. Returns the loss history.

    ``unk_rate`` replaces that fraction of input tokens by UNK during
    training, which makes the tagger tolerate transcription errors.
    """
    data = []
    for tokens, tags in corpus:
        if len(tokens) != len(tags):
            raise TagVocabMismatch("token and tag counts differ")
        bad = [t for t in tags if t not in model.tags.index]
        if bad:
            raise TagVocabMismatch(f"tags outside the tag set: {sorted(set(bad))}")
        if tokens:
            data.append((np.asarray(model.vocab.encode(tokens)), np.asarray(model.tags.encode(tags))))
    if not data:
        raise EmptyCorpus("no labeled sentences")
    rng = np.random.default_rng([seed, 4])
    params = model.parameters()
    mlm = {id(p) for p in model.mlm_head.parameters()}
    params = [p for p in params if id(p) not in mlm]
    opt = Adam(params, lr=lr)
    history = []
    for step in range(1, steps + 1):
        batch = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        opt.zero_grad()
        parts = []
        for group in _group_by_length([d[0] for d in data], batch):
            ids = np.stack([data[i][0] for i in group])
            if unk_rate > 0:
                ids = np.where(rng.random(ids.shape) < unk_rate, UNK_ID, ids)
            tags = np.stack([data[i][1] for i in group])
            parts.append(F.mul(tagger_loss(model, ids, tags), float(len(group))))
        loss = F.mul(F.sum(F.stack(parts)), 1.0 / len(batch))
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("step=%d loss=%.6f", step, loss.item())
    return history

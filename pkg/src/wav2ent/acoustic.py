"""Self-supervised acoustic encoder.

Raw waveform -> strided convolutions (latent frames Z) -> span masking ->
transformer (context frames C). Pretraining asks each masked context frame
to pick out the Gumbel-quantized latent of its own position among
distractors drawn from other masked positions of the same utterance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio_io import Waveform
from .core import functional as F
from .core.layers import LayerNorm, Linear, Module, TransformerBlock, normal_param, sinusoidal_positions
from .core.optim import Adam
from .core.tensor import Tensor, no_grad
from .errors import EmptyManifest, InputTooShort, InsufficientMaskedFrames, ShapeMismatch

log = logging.getLogger(__name__)

DEFAULT_CONV_SPEC = ((64, 10, 5), (64, 4, 2), (64, 4, 2))
CONV_BIAS_STD = 0.05


@dataclass
class EncoderConfig:
    conv_spec: tuple = DEFAULT_CONV_SPEC
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mask_prob: float = 0.15
    mask_span: int = 2
    groups: int = 2
    entries: int = 32
    temperature: float = 0.1
    gumbel_tau: float = 2.0
    distractors: int = 10
    diversity_weight: float = 0.1
    # logits of the quantizer start peaked enough to dominate Gumbel noise
    quantizer_init_std: float = 1.0

    def __post_init__(self):
        self.conv_spec = tuple(tuple(int(v) for v in layer) for layer in self.conv_spec)
        if not self.conv_spec or any(v <= 0 for layer in self.conv_spec for v in layer):
            raise ValueError("conv_spec entries must be positive (channels, kernel, stride)")
        if self.conv_spec[-1][0] != self.d_model:
            raise ValueError("last conv layer must have d_model channels")
        for name in ("d_model", "n_heads", "mask_span", "groups", "entries", "distractors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.d_model % self.n_heads or self.d_model % self.groups:
            raise ValueError("d_model must be divisible by n_heads and by groups")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in (0, 1]")
        if self.temperature <= 0 or self.gumbel_tau <= 0 or self.diversity_weight < 0:
            raise ValueError("temperatures must be positive, diversity weight non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_spec"] = [list(layer) for layer in self.conv_spec]
        return d

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for _, k, s in self.conv_spec:
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, _, s in self.conv_spec)

    def frames_for(self, n_samples: int) -> int:
        """Latent length after the conv stack; 0 when the input is too short."""
        t = n_samples
        for _, k, s in self.conv_spec:
            if t < k:
                return 0
            t = (t - k) // s + 1
        return t


@dataclass
class MaskInfo:
    masked_indices: np.ndarray
    mask: np.ndarray = field(repr=False)
    mask_vector: Tensor = field(repr=False)


class Quantizer(Module):
    """G codebooks of V entries; each frame picks one entry per group."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.groups = cfg.groups
        self.entries = cfg.entries
        self.logits = Linear(rng, cfg.d_model, cfg.groups * cfg.entries)
        self.logits.w.data = rng.normal(0.0, cfg.quantizer_init_std,
                                        self.logits.w.shape).astype(np.float32)
        self.codebook = normal_param(rng, (cfg.groups, cfg.entries, cfg.d_model // cfg.groups), std=1.0)


class AcousticModel(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c_in = 1
        self.convs = []
        self.conv_biases = []
        self.conv_norms = []
        for c_out, k, _ in cfg.conv_spec:
            # fan-in scaled: at 0.02 the first layer's output is no louder than its bias
            bound = 1.0 / np.sqrt(c_in * k)
            self.convs.append(Tensor(rng.uniform(-bound, bound, (c_out, c_in, k)).astype(np.float32),
                                     requires_grad=True))
            # a nonzero bias keeps near-silent frames from being rescaled into noise by the norm
            self.conv_biases.append(normal_param(rng, (c_out, 1), std=CONV_BIAS_STD))
            self.conv_norms.append(LayerNorm(c_out))
            c_in = c_out
        self.quantizer = Quantizer(rng, cfg)
        self.mask_vector = normal_param(rng, (cfg.d_model,))
        self.blocks = [TransformerBlock(rng, cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)

    def encoder_parameters(self) -> list[Tensor]:
        return self.convs + self.conv_biases + [p for ln in self.conv_norms for p in ln.parameters()]

    def context_parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()] + self.final_norm.parameters()


# -- forward pieces ------------------------------------------------------------

def feature_encoder(w, model: AcousticModel) -> Tensor:
    """Standardized samples [..., T] -> latent frames [..., T_z, d_model]."""
    if isinstance(w, Waveform):
        x = Tensor(w.samples)
    elif isinstance(w, Tensor):
        x = w
    else:
        x = Tensor(np.asarray(w, dtype=np.float32))
    n = x.shape[-1]
    rf = model.cfg.receptive_field
    if n < rf:
        raise InputTooShort(f"{n} samples is shorter than the receptive field ({rf})")
    h = F.reshape(x, x.shape[:-1] + (1, n))
    for kernel, bias, (_, _, stride), norm in zip(model.convs, model.conv_biases, model.cfg.conv_spec,
                                                 model.conv_norms):
        h = F.add(F.conv1d(h, kernel, stride), bias)
        h = F.gelu(norm(F.swapaxes(h, -1, -2)))
        h = F.swapaxes(h, -1, -2)
    return F.swapaxes(h, -1, -2)


def sample_mask(T: int, p: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean span mask; at least one span is always present."""
    if T < span:
        raise InputTooShort(f"sequence of {T} frames shorter than mask span {span}")
    starts = np.flatnonzero(rng.random(T) < p)
    if starts.size == 0:
        starts = np.array([rng.integers(T)])
    mask = np.zeros(T, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return mask


def apply_time_mask(z: Tensor, cfg: EncoderConfig, rng: np.random.Generator,
                    mask_vector: Tensor, mask: np.ndarray | None = None):
    """Replace sampled spans of ``z`` [T, d] with the learned mask vector."""
    if mask is None:
        mask = sample_mask(z.shape[-2], cfg.mask_prob, cfg.mask_span, rng)
    info = MaskInfo(np.flatnonzero(mask), mask, mask_vector)
    return F.where(mask[:, None], mask_vector, z), info


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-10, 1.0 - 1e-10)))


def quantize_gumbel(z: Tensor, quantizer: Quantizer, tau: float, training: bool,
                    rng: np.random.Generator | None = None):
    """Quantize frames ``z`` [..., d] to codebook concatenations.

    Returns ``(q, indices, probs)``: q [..., d], indices [..., G] and the
    noise-free per-frame code distribution [..., G, V] used by the
    diversity penalty.
    """
    G, V = quantizer.groups, quantizer.entries
    logits = F.reshape(quantizer.logits(z), z.shape[:-1] + (G, V))
    probs = F.softmax(logits, axis=-1)
    if training:
        if rng is None:
            raise ValueError("training-mode quantization needs an rng")
        noisy = F.add(logits, gumbel_noise(logits.shape, rng).astype(logits.dtype))
        soft = F.softmax(noisy * (1.0 / tau), axis=-1)
        idx = np.argmax(soft.data, axis=-1)
        onehot = np.eye(V, dtype=soft.dtype)[idx]
        sel = F.straight_through(soft, onehot)
        # [..., G, 1, V] @ [G, V, d/G] -> [..., G, 1, d/G]
        sel = F.reshape(sel, sel.shape[:-1] + (1, V))
        q = F.matmul(sel, quantizer.codebook)
        q = F.reshape(q, z.shape)
    else:
        idx = np.argmax(logits.data, axis=-1)
        q = Tensor(quantizer.codebook.data[np.arange(G), idx].reshape(z.shape))
    return q, idx, probs


def context_network(z_masked: Tensor, model: AcousticModel) -> Tensor:
    cfg = model.cfg
    if z_masked.shape[-1] != cfg.d_model:
        raise ShapeMismatch(f"latent width {z_masked.shape[-1]} != d_model {cfg.d_model}")
    T = z_masked.shape[-2]
    x = F.add(z_masked, sinusoidal_positions(T, cfg.d_model).astype(z_masked.dtype))
    for block in model.blocks:
        x = block(x)
    return model.final_norm(x)


def encode(w, model: AcousticModel) -> Tensor:
    """Inference path: waveform -> context frames, no masking."""
    return context_network(feature_encoder(w, model), model)


# -- objectives ------------------------------------------------------------------

def sample_distractors(masked: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """[n_masked, K] frame indices, drawn from the other masked positions."""
    n = masked.size
    if n < 2:
        raise InsufficientMaskedFrames(f"need at least 2 masked frames, got {n}")
    out = np.empty((n, K), dtype=np.int64)
    for i in range(n):
        pool = np.delete(masked, i)
        out[i] = rng.choice(pool, size=K, replace=pool.size < K)
    return out


def contrastive_loss(c: Tensor, q: Tensor, mi: MaskInfo, kappa: float, K: int,
                     rng: np.random.Generator, distractors: np.ndarray | None = None) -> Tensor:
    """Mean InfoNCE over masked frames of one utterance (c, q: [T, d])."""
    masked = mi.masked_indices
    if distractors is None:
        distractors = sample_distractors(masked, K, rng)
    cand_idx = np.concatenate([masked[:, None], distractors], axis=1)
    logits = contrastive_logits(c, q, masked, cand_idx, kappa)
    return F.mul(F.sum(F.index(F.log_softmax(logits, axis=-1), (slice(None), 0))), -1.0 / masked.size)


def contrastive_logits(c: Tensor, q: Tensor, masked: np.ndarray, cand_idx: np.ndarray,
                       kappa: float) -> Tensor:
    ct = F.reshape(F.index(c, masked), (masked.size, 1, c.shape[-1]))
    cands = F.index(q, cand_idx)
    return F.cosine_similarity(ct, cands) * (1.0 / kappa)


def diversity_loss(soft_probs: Tensor) -> Tensor:
    """(1/G) sum_g (V - exp(H(mean usage_g))) / V for probs of shape [G, V]."""
    G, V = soft_probs.shape
    ent = F.mul(F.sum(F.mul(soft_probs, F.log(F.add(soft_probs, 1e-12))), axis=-1), -1.0)
    return F.mul(F.sum(F.sub(float(V), F.exp(ent))), 1.0 / (G * V))


# -- training ----------------------------------------------------------------------

def pretrain_step(model: AcousticModel, waves: list[np.ndarray], rng: np.random.Generator):
    """Loss graph for one batch of equal-length standardized waveforms.

    Returns (total loss, contrastive part, diversity part).
    """
    cfg = model.cfg
    x = Tensor(np.stack(waves))
    z = feature_encoder(x, model)                       # [B, T, d]
    B, T, d = z.shape
    q, _, probs = quantize_gumbel(z, model.quantizer, cfg.gumbel_tau, True, rng)
    masks = np.stack([sample_mask(T, cfg.mask_prob, cfg.mask_span, rng) for _ in range(B)])
    zm = F.where(masks[..., None], model.mask_vector, z)
    c = context_network(zm, model)
    terms = []
    count = 0
    for b in range(B):
        masked = np.flatnonzero(masks[b])
        if masked.size < 2:
            continue
        cand = np.concatenate([masked[:, None], sample_distractors(masked, cfg.distractors, rng)], axis=1)
        cand = cand + b * T
        logits = contrastive_logits(F.reshape(c, (B * T, d)), F.reshape(q, (B * T, d)),
                                    masked + b * T, cand, cfg.temperature)
        terms.append(F.sum(F.index(F.log_softmax(logits, axis=-1), (slice(None), 0))))
        count += masked.size
    if not terms:
        raise InsufficientMaskedFrames("no utterance in the batch has two masked frames")
    closs = F.mul(F.sum(F.stack(terms)), -1.0 / count)
    mean_probs = F.mean(F.reshape(probs, (B * T, cfg.groups, cfg.entries)), axis=0)
    dloss = diversity_loss(mean_probs)
    return F.add(closs, F.mul(dloss, cfg.diversity_weight)), closs, dloss


@dataclass
class PretrainResult:
    model: AcousticModel
    history: list[dict]


def pretrain(waves: list[np.ndarray], cfg: EncoderConfig, steps: int, seed: int,
             batch_size: int = 8, lr: float = 2e-3, log_every: int = 0,
             model: AcousticModel | None = None,
             max_samples: int | None = None) -> PretrainResult:
    """Contrastive + diversity pretraining over standardized waveforms.

    Each step draws a fresh random subset of utterances and crops them to
    the shortest member (and to ``max_samples`` if given), so no padding is
    needed. Fixed length buckets give too few distinct batches to learn from.
    """
    if not waves:
        raise EmptyManifest("no utterances to pretrain on")
    model = model or AcousticModel(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(model.parameters(), lr=lr)
    size = min(batch_size, len(waves))
    history = []
    for step in range(1, steps + 1):
        chosen = rng.choice(len(waves), size=size, replace=False)
        n = min(len(waves[i]) for i in chosen)
        if max_samples:
            n = min(n, max_samples)
        batch = [np.asarray(waves[i][:n], dtype=np.float32) for i in chosen]
        opt.zero_grad()
        total, closs, dloss = pretrain_step(model, batch, rng)
        total.backward()
        opt.step()
        history.append({"step": step, "loss": total.item(), "contrastive": closs.item(),
                        "diversity": dloss.item()})
        if log_every and step % log_every == 0:
            log.info("step=%d loss=%.6f", step, total.item())
    return PretrainResult(model, history)


def latent_frames(w, model: AcousticModel) -> np.ndarray:
    with no_grad():
        return feature_encoder(w, model).data

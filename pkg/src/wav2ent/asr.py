"""Speech recognizer: pretrained acoustic encoder + CTC head.

Fine-tuning freezes the convolutional feature encoder and trains the
context network and the output projection. Because the encoder is frozen
and nothing is masked, latent frames are computed once and reused.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ctc
from .acoustic import AcousticModel, context_network, encode, latent_frames
from .core import functional as F
from .core.layers import Module
from .core.optim import Adam
from .core.tensor import Tensor, no_grad
from .errors import EmptyManifest, LengthMismatch, TargetTooLong
from .vocab import DEFAULT_VOCAB, CtcVocab

log = logging.getLogger(__name__)


class AsrModel(Module):
    def __init__(self, acoustic: AcousticModel, seed: int = 0, vocab: CtcVocab = DEFAULT_VOCAB):
        self.acoustic = acoustic
        self.vocab = vocab
        rng = np.random.default_rng([seed, 2])
        self.head = ctc.CtcHead(rng, acoustic.cfg.d_model, vocab.size)

    def trainable_parameters(self) -> list[Tensor]:
        return self.acoustic.context_parameters() + self.head.parameters()


@dataclass
class FinetuneResult:
    model: AsrModel
    history: list[dict]


def frame_log_probs(w, model: AsrModel) -> np.ndarray:
    """[T, C] log-probabilities for one standardized waveform."""
    with no_grad():
        return ctc.project_logits(encode(w, model.acoustic), model.head).data


def transcribe(w, model: AsrModel, beam: int = 1) -> str:
    lp = frame_log_probs(w, model)
    if beam <= 1:
        return ctc.greedy_decode(lp, model.vocab)
    return ctc.beam_decode(lp, model.vocab, width=beam)


def finetune(acoustic: AcousticModel, waves, transcripts, steps: int, seed: int,
             batch_size: int = 4, lr: float = 1e-3, log_every: int = 0,
             model: AsrModel | None = None) -> FinetuneResult:
    """CTC fine-tuning. Each step averages the loss over ``batch_size``
    utterances drawn with replacement."""
    waves, transcripts = list(waves), list(transcripts)
    if len(waves) != len(transcripts):
        raise LengthMismatch(f"{len(waves)} waveforms vs {len(transcripts)} transcripts")
    if not waves:
        raise EmptyManifest("no utterances to fine-tune on")
    model = model or AsrModel(acoustic, seed)
    targets = [model.vocab.encode(t) for t in transcripts]
    latents = [latent_frames(np.asarray(w, dtype=np.float32), acoustic) for w in waves]
    for i, (z, y) in enumerate(zip(latents, targets)):
        if ctc.min_frames(y) > z.shape[0]:
            raise TargetTooLong(f"utterance {i}: {z.shape[0]} frames cannot carry {len(y)} characters")

    rng = np.random.default_rng([seed, 3])
    opt = Adam(model.trainable_parameters(), lr=lr)
    history = []
    for step in range(1, steps + 1):
        opt.zero_grad()
        losses = []
        for j in rng.integers(0, len(waves), batch_size):
            c = context_network(Tensor(latents[j]), acoustic)
            losses.append(ctc.ctc_nll(ctc.project_logits(c, model.head), targets[j]))
        loss = F.mul(F.sum(F.stack(losses)), 1.0 / batch_size)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item()})
        if log_every and step % log_every == 0:
            log.info("step=%d loss=%.6f", step, loss.item())
    return FinetuneResult(model, history)


def evaluate(model: AsrModel, waves, transcripts, beam: int = 1) -> tuple[float, float, list[str]]:
    """(WER, CER, hypotheses) over a labelled set."""
    hyps = [transcribe(w, model, beam) for w in waves]
    wer, cer = ctc.edit_distance_rates(list(transcripts), hyps)
    return wer, cer, hyps

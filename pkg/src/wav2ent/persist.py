"""Models <-> checkpoints. Geometry travels in the checkpoint metadata, so a
checkpoint is self-describing and does not depend on the current config."""

from __future__ import annotations

from .acoustic import AcousticModel, EncoderConfig
from .asr import AsrModel
from .checkpoint import Checkpoint
from .errors import CheckpointError, ShapeMismatch
from .ner.crf import TagSet
from .ner.model import NerConfig, NerModel
from .ner.tokenizer import SPECIALS, TokenVocab
from .vocab import CtcVocab


def acoustic_checkpoint(model: AcousticModel) -> Checkpoint:
    return Checkpoint("acoustic", model.state_dict(), {"encoder": model.cfg.to_dict()})


def asr_checkpoint(model: AsrModel) -> Checkpoint:
    meta = {"encoder": model.acoustic.cfg.to_dict(), "characters": model.vocab.characters}
    return Checkpoint("acoustic+ctc", model.state_dict(), meta)


def ner_checkpoint(model: NerModel) -> Checkpoint:
    meta = {"ner": model.cfg.to_dict(), "tokens": model.vocab.itos[len(SPECIALS):],
            "entity_types": list(model.tags.types)}
    return Checkpoint("ner", model.state_dict(), meta)


def _expect(ckpt: Checkpoint, *kinds: str) -> None:
    if ckpt.kind not in kinds:
        want = " or ".join(repr(k) for k in kinds)
        raise CheckpointError(f"checkpoint kind mismatch: expected {want}, got {ckpt.kind!r}")


def _fill(model, tensors: dict) -> None:
    try:
        model.load_state_dict(tensors)
    except ShapeMismatch as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc


def _encoder_cfg(ckpt: Checkpoint) -> EncoderConfig:
    try:
        return EncoderConfig(**ckpt.meta["encoder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint has no usable encoder config: {exc}") from exc


def load_acoustic(ckpt: Checkpoint) -> AcousticModel:
    """Acoustic encoder from either an acoustic or an acoustic+ctc checkpoint."""
    _expect(ckpt, "acoustic", "acoustic+ctc")
    model = AcousticModel(_encoder_cfg(ckpt))
    tensors = ckpt.tensors
    if ckpt.kind == "acoustic+ctc":
        tensors = {k[len("acoustic."):]: v for k, v in tensors.items() if k.startswith("acoustic.")}
    _fill(model, tensors)
    return model


def load_asr(ckpt: Checkpoint) -> AsrModel:
    _expect(ckpt, "acoustic+ctc")
    try:
        vocab = CtcVocab(ckpt.meta["characters"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint has no usable character set: {exc}") from exc
    model = AsrModel(AcousticModel(_encoder_cfg(ckpt)), vocab=vocab)
    _fill(model, ckpt.tensors)
    return model


def load_ner(ckpt: Checkpoint) -> NerModel:
    _expect(ckpt, "ner")
    try:
        cfg = NerConfig(**ckpt.meta["ner"])
        vocab = TokenVocab(ckpt.meta["tokens"])
        tags = TagSet(ckpt.meta["entity_types"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint has no usable NER metadata: {exc}") from exc
    model = NerModel(vocab, cfg, tags)
    _fill(model, ckpt.tensors)
    return model

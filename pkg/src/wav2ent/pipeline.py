"""Audio in, entities out: transcription, tagging and corpus-level evaluation."""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .asr import AsrModel, transcribe
from .audio_io import CANONICAL_RATE, parse_wav, resample_linear, standardize
from .corpus import GoldEntity, Utterance
from .ctc import error_rate, levenshtein
from .errors import DataError, EmptyCorpus, IoError
from .ner.crf import entities_to_tags
from .ner.model import NerModel, extract_entities
from .ner.tokenizer import normalize_token, split_words, tokenize
from .persist import load_asr, load_ner

# all-zero 16-bit PCM; anything quieter than one quantization step is silence
SILENCE_PEAK = 1.0 / 32768.0

EVAL_FIELDS = ("utt_id", "ref", "hyp", "cer", "word_errors", "ref_words", "char_errors", "ref_chars",
               "entity_tp", "entity_pred", "entity_gold")


def transcribe_bytes(data: bytes, asr: AsrModel, beam: int = 1) -> str:
    w = parse_wav(data)
    if w.sample_rate != CANONICAL_RATE:
        w = resample_linear(w, CANONICAL_RATE)
    if len(w) == 0 or float(np.max(np.abs(w.samples))) < SILENCE_PEAK:
        return ""
    if asr.acoustic.cfg.frames_for(len(w)) == 0:
        return ""
    return transcribe(standardize(w).samples, asr, beam)


def tag_transcript(transcript: str, ner: NerModel) -> list[dict]:
    words = split_words(transcript)
    if not words:
        return []
    tokens = [normalize_token(p) for p in words]
    return [{"type": e.type, "text": e.text, "start_token": e.start, "end_token": e.end}
            for e in extract_entities(ner, tokens, surface=words)]


def extract(data: bytes, asr: AsrModel, ner: NerModel, beam: int = 1) -> dict:
    """The extraction result for one WAV file's bytes."""
    transcript = transcribe_bytes(data, asr, beam)
    return {"transcript": transcript, "entities": tag_transcript(transcript, ner)}


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def audio_path(manifest, u: Utterance) -> Path:
    if not u.audio_path:
        raise DataError(f"utterance {u.id} has no audio")
    return Path(manifest).parent / u.audio_path


def gold_keys(u: Utterance) -> Counter:
    words = split_words(u.text)
    return Counter((e.type, " ".join(words[e.start:e.end])) for e in u.entities)


def score_utterance(u: Utterance, result: dict) -> dict:
    """Per-utterance error counts. Entities match on (type, surface text),
    since predicted spans index the hypothesis, not the reference."""
    ref, hyp = u.text, result["transcript"]
    ref_words = ref.split()
    pred = Counter((e["type"], e["text"]) for e in result["entities"])
    gold = gold_keys(u)
    char_errors = levenshtein(ref, hyp)
    return {
        "utt_id": u.id, "ref": ref, "hyp": hyp, "cer": error_rate(char_errors, len(ref)),
        "word_errors": levenshtein(ref_words, hyp.split()), "ref_words": len(ref_words),
        "char_errors": char_errors, "ref_chars": len(ref),
        "entity_tp": sum((pred & gold).values()), "entity_pred": sum(pred.values()),
        "entity_gold": sum(gold.values()),
    }


def aggregate(rows) -> dict:
    rows = list(rows)
    tot = {k: sum(r[k] for r in rows) for k in EVAL_FIELDS[4:]}
    p = tot["entity_tp"] / tot["entity_pred"] if tot["entity_pred"] else 0.0
    r = tot["entity_tp"] / tot["entity_gold"] if tot["entity_gold"] else 0.0
    return {
        "wer": error_rate(tot["word_errors"], tot["ref_words"]),
        "cer": error_rate(tot["char_errors"], tot["ref_chars"]),
        "entity_precision": p,
        "entity_recall": r,
        "entity_f1": 2 * p * r / (p + r) if p + r else 0.0,
        "n_utterances": len(rows),
    }


# -- parallel inference ------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(asr_path, ner_path, beam):
    _WORKER["asr"] = load_asr(ckpt_io.load(asr_path))
    _WORKER["ner"] = load_ner(ckpt_io.load(ner_path))
    _WORKER["beam"] = beam


def _extract_path(path) -> dict:
    return extract(read_bytes(path), _WORKER["asr"], _WORKER["ner"], _WORKER["beam"])


def extract_many(paths, asr_path, ner_path, beam: int = 1, jobs: int = 1) -> list[dict]:
    """Results in input order; ``jobs > 1`` spreads files over worker processes."""
    paths = list(paths)
    if jobs <= 1 or len(paths) < 2:
        _init_worker(asr_path, ner_path, beam)
        return [_extract_path(p) for p in paths]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(asr_path, ner_path, beam)) as pool:
        return list(pool.map(_extract_path, paths))


# -- labeled text for the tagger --------------------------------------------------------

def labeled_from_utterances(utterances) -> list[tuple[list[str], list[str]]]:
    out = []
    for u in utterances:
        tokens = tokenize(u.text)
        for e in u.entities:
            if not 0 <= e.start < e.end <= len(tokens):
                raise DataError(f"utterance {u.id}: entity span {e.start}:{e.end} outside {len(tokens)} tokens")
        out.append((tokens, entities_to_tags(len(tokens), u.entities)))
    return out


def load_labeled(path) -> list[tuple[list[str], list[str]]]:
    """(tokens, tags) pairs from a labeled-corpus JSONL ({"tokens", "tags"}
    records) or from a manifest (tags derived from its entity spans)."""
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    r = json.loads(line)
                    if "tokens" in r:
                        tokens, tags = [str(t) for t in r["tokens"]], [str(t) for t in r["tags"]]
                    else:
                        u = Utterance(str(r["id"]), str(r["text"]),
                                      [GoldEntity(str(e["type"]), int(e["start"]), int(e["end"]))
                                       for e in r.get("entities", [])])
                        (tokens, tags), = labeled_from_utterances([u])
                except (ValueError, KeyError, TypeError, AttributeError, DataError) as exc:
                    raise DataError(f"{path}:{lineno}: bad labeled record ({exc})") from exc
                out.append((tokens, tags))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not out:
        raise EmptyCorpus(f"{path} holds no labeled sentences")
    return out

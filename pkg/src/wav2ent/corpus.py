"""Deterministic synthetic customer-service corpus.

Each character is rendered as a short sine tone on a chromatic scale, so
the acoustic task is learnable but not trivial. Text comes from slot-filled
templates, which makes gold entity spans exact by construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .audio_io import Waveform, write_wav_file
from .errors import DataError, EmptyTemplateSet, IoError, VocabViolation
from .ner.crf import ENTITY_TYPES
from .ner.tokenizer import tokenize
from .vocab import CHARACTERS, DEFAULT_VOCAB

TONE_SECONDS = 0.060
GAP_SECONDS = 0.010
TONE_AMPLITUDE = 0.5
BASE_FREQ = 220.0
DEFAULT_SIGMA = 0.01
_SLOT_RE = re.compile(r"\{(" + "|".join(ENTITY_TYPES) + r")\}")


@dataclass(frozen=True)
class GoldEntity:
    type: str
    start: int
    end: int


@dataclass
class Utterance:
    id: str
    text: str
    entities: list[GoldEntity] = field(default_factory=list)
    audio_path: str | None = None


@dataclass
class TemplateSet:
    templates: list[str]
    slots: dict[str, list[str]]

    @classmethod
    def default(cls) -> "TemplateSet":
        raw = resources.files("wav2ent.data").joinpath("templates.json").read_text("utf-8")
        return cls.from_dict(json.loads(raw))

    @classmethod
    def from_dict(cls, d) -> "TemplateSet":
        return cls(list(d["templates"]), {k: list(v) for k, v in d["slots"].items()})


def char_frequency(c: str) -> float:
    return BASE_FREQ * 2.0 ** (CHARACTERS.index(c) / 12.0)


def fill_template(template: str, values: dict[str, str]) -> tuple[str, list[GoldEntity]]:
    """Substitute slots left to right and record their token spans."""
    words: list[str] = []
    entities = []
    pos = 0
    for m in _SLOT_RE.finditer(template):
        words += tokenize(template[pos:m.start()])
        value_tokens = tokenize(values[m.group(1)])
        entities.append(GoldEntity(m.group(1), len(words), len(words) + len(value_tokens)))
        words += values[m.group(1)].split()
        pos = m.end()
    words += tokenize(template[pos:])
    return " ".join(words), entities


def gen_text_corpus(templates: TemplateSet, n: int, seed: int) -> list[Utterance]:
    if not templates.templates:
        raise EmptyTemplateSet("no templates")
    if n < 0:
        raise ValueError("n must be non-negative")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        template = templates.templates[rng.integers(len(templates.templates))]
        values = {}
        for slot in _SLOT_RE.findall(template):
            inventory = templates.slots[slot]
            values[slot] = inventory[rng.integers(len(inventory))]
        text, entities = fill_template(template, values)
        DEFAULT_VOCAB.check(text)
        out.append(Utterance(f"utt{i:05d}", text, entities))
    return out


def synth_speech(text: str, rate: int = 16000, sigma: float = DEFAULT_SIGMA, seed: int = 0) -> Waveform:
    """Render ``text`` as tone-speech: one tone plus a short gap per character."""
    for c in text:
        if c not in DEFAULT_VOCAB.char_to_id:
            raise VocabViolation(f"cannot synthesize {c!r}")
    n_tone = int(round(TONE_SECONDS * rate))
    n_gap = int(round(GAP_SECONDS * rate))
    t = np.arange(n_tone, dtype=np.float64) / rate
    pieces = []
    for c in text:
        seg = np.zeros(n_tone + n_gap)
        if c != " ":
            seg[:n_tone] = TONE_AMPLITUDE * np.sin(2 * np.pi * char_frequency(c) * t)
        pieces.append(seg)
    x = np.concatenate(pieces) if pieces else np.zeros(0)
    if sigma > 0 and x.size:
        x = x + np.random.default_rng(seed).normal(0.0, sigma, x.size)
    return Waveform(rate, np.clip(x, -1.0, 1.0).astype(np.float32))


def utterance_record(u: Utterance) -> dict:
    return {
        "id": u.id,
        "audio": u.audio_path,
        "text": u.text,
        "entities": [{"type": e.type, "start": e.start, "end": e.end} for e in u.entities],
    }


def emit_manifest(utterances, out_dir, sigma: float = DEFAULT_SIGMA, seed: int = 0,
                  rate: int = 16000) -> Path:
    """Write one WAV per utterance and ``manifest.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(exist_ok=True)
        (out_dir / "wavs").mkdir(exist_ok=True)
        lines = []
        for i, u in enumerate(utterances):
            rel = f"wavs/{u.id}.wav"
            noise_seed = int(np.random.SeedSequence([seed, i, 1]).generate_state(1)[0])
            wav = synth_speech(u.text, rate, sigma, seed=noise_seed)
            write_wav_file(out_dir / rel, wav)
            u.audio_path = rel
            lines.append(json.dumps(utterance_record(u), ensure_ascii=False) + "\n")
        manifest = out_dir / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return manifest


def load_manifest(path) -> list[Utterance]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    r = json.loads(line)
                    ents = [GoldEntity(e["type"], int(e["start"]), int(e["end"]))
                            for e in r.get("entities", [])]
                    out.append(Utterance(str(r["id"]), str(r["text"]), ents, r.get("audio")))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return out

"""Character inventory shared by the speech synthesizer and the CTC head."""

from __future__ import annotations

import string

from .errors import VocabViolation

CHARACTERS = string.ascii_lowercase + string.digits + " "
BLANK_ID = 0


class CtcVocab:
    """Characters a-z, 0-9 and space at ids 1..37; the CTC blank is id 0."""

    def __init__(self, characters: str = CHARACTERS):
        if len(set(characters)) != len(characters):
            raise ValueError("duplicate characters in vocabulary")
        self.characters = characters
        self.char_to_id = {c: i + 1 for i, c in enumerate(characters)}
        self.id_to_char = {i + 1: c for i, c in enumerate(characters)}

    @property
    def size(self) -> int:
        """Number of output classes including the blank."""
        return len(self.characters) + 1

    def check(self, text: str) -> None:
        bad = sorted({c for c in text if c not in self.char_to_id})
        if bad:
            raise VocabViolation(f"characters outside the vocabulary: {bad!r}")

    def encode(self, text: str) -> list[int]:
        self.check(text)
        return [self.char_to_id[c] for c in text]

    def decode(self, ids) -> str:
        return "".join(self.id_to_char[i] for i in ids if i != BLANK_ID)


DEFAULT_VOCAB = CtcVocab()

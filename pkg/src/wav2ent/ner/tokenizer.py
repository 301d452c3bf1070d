"""Word-level tokenizer and token vocabulary."""

from __future__ import annotations

import re
from collections import Counter

NUM_TOKEN = "<num>"
PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"<num>|[^\W_]+|[^\w\s]|_")


def split_words(text: str) -> list[str]:
    """Lowercased surface pieces: words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize_token(piece: str) -> str:
    if len(piece) >= 4 and piece.isascii() and piece.isdigit():
        return NUM_TOKEN
    return piece


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, bucket long numbers.

    >>> tokenize("Hello, John!")
    ['hello', ',', 'john', '!']
    >>> tokenize("order 58213 please")
    ['order', '<num>', 'please']
    """
    return [normalize_token(p) for p in split_words(text)]


class TokenVocab:
    """Token <-> id map with the five specials at ids 0..4."""

    def __init__(self, tokens=()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, corpus, min_freq: int = 1) -> "TokenVocab":
        """Vocabulary from an iterable of token lists, in first-seen order."""
        counts = Counter()
        order = []
        for toks in corpus:
            for t in toks:
                if t not in counts:
                    order.append(t)
                counts[t] += 1
        return cls(t for t in order if counts[t] >= min_freq and t not in SPECIALS)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

"""Sentence splitting and token accounting.

Everything downstream (budgets, pooling spans, masking) is expressed in the
units of a :class:`Tokenizer`.  The default one is regex based and has no
dependencies; any object with a compatible ``tokenize`` method can replace it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol

__all__ = [
    "ABBREVIATIONS",
    "Document",
    "RegexTokenizer",
    "Sentence",
    "Token",
    "Tokenizer",
    "count_tokens",
    "make_document",
    "split_sentences",
    "tokenize",
]


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[Token]: ...


class RegexTokenizer:
    """Word runs, apostrophe suffixes and single punctuation characters.

    ``don't`` becomes ``don`` + ``'t``; every other non-word character is its
    own token.  Tokens never contain whitespace, so counts are additive over
    whitespace-joined pieces and monotone over prefixes.
    """

    _PATTERN = re.compile(r"(?<=[^\W\d_])['’][^\W\d_]+|[^\W_]+|\S")

    def tokenize(self, text: str) -> list[Token]:
        return [Token(m.group(), m.start(), m.end()) for m in self._PATTERN.finditer(text)]


DEFAULT_TOKENIZER = RegexTokenizer()


def tokenize(text: str, tokenizer: Tokenizer | None = None) -> list[Token]:
    return (tokenizer or DEFAULT_TOKENIZER).tokenize(text)


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return len(tokenize(text, tokenizer))


@dataclass(frozen=True)
class Sentence:
    text: str
    char_span: tuple[int, int]
    token_span: tuple[int, int]  # inclusive

    @property
    def token_count(self) -> int:
        i, j = self.token_span
        return j - i + 1


@dataclass(frozen=True)
class Document:
    text: str
    sentences: tuple[Sentence, ...]
    tokens: tuple[Token, ...] = field(repr=False)

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.sentences)

    def separators(self) -> list[str]:
        """The K+1 gaps around the sentences: leading, inter-sentence, trailing."""
        gaps, pos = [], 0
        for s in self.sentences:
            gaps.append(self.text[pos : s.char_span[0]])
            pos = s.char_span[1]
        gaps.append(self.text[pos:])
        return gaps


# Compared case-insensitively against the word that carries the period.
ABBREVIATIONS = frozenset(
    {"dr.", "mr.", "mrs.", "ms.", "prof.", "fig.", "eq.", "e.g.", "i.e.", "etc.", "vs.", "st.", "no."}
)
_TERMINALS = ".!?"
_CLOSERS = "\"')]}”’"
_OPENING_QUOTES = "\"'“‘"


def _is_boundary(text: str, k: int) -> bool:
    """Whitespace run starting at ``k`` ends a sentence (non-newline rule)."""
    e = k - 1
    while e >= 0 and text[e] in _CLOSERS:
        e -= 1
    if e < 0 or text[e] not in _TERMINALS:
        return False
    w = k
    while w < len(text) and text[w].isspace():
        w += 1
    if w == len(text):
        return False
    nxt = text[w]
    if not (nxt.isupper() or nxt in _OPENING_QUOTES):
        return False
    if text[e] == ".":
        s = e
        while s > 0 and not text[s - 1].isspace():
            s -= 1
        word = text[s : e + 1].lstrip(_OPENING_QUOTES + "([{").lower()
        if word in ABBREVIATIONS:
            return False
    return True


_WS_RUN = re.compile(r"\s+")


def _raw_segments(text: str) -> list[tuple[int, int]]:
    segments: list[tuple[int, int]] = []
    start = None
    pos = 0
    for m in _WS_RUN.finditer(text):
        k, end = m.span()
        if start is None:
            if k > pos:
                start = pos
            else:
                pos = end
                continue
        cut = "\n" in m.group() or _is_boundary(text, k)
        if cut:
            segments.append((start, k))
            start = None
        pos = end
    if start is None and pos < len(text):
        start = pos
    if start is not None:
        end = len(text.rstrip())
        if end > start:
            segments.append((start, end))
    return segments


def _build(text: str, tokenizer: Tokenizer | None) -> Document:
    tokens = tokenize(text, tokenizer)
    sentences = []
    t = 0
    for a, b in _raw_segments(text):
        while t < len(tokens) and tokens[t].end <= a:
            t += 1
        first = t
        while t < len(tokens) and tokens[t].start < b:
            t += 1
        if t == first:
            # zero-token segment: its characters stay in the separator gap
            continue
        sentences.append(Sentence(text[a:b], (a, b), (first, t - 1)))
    return Document(text, tuple(sentences), tuple(tokens))


def split_sentences(text: str, tokenizer: Tokenizer | None = None) -> list[Sentence]:
    """Split ``text`` into sentences with character and token spans.

    A sentence ends at a run of ``.``/``!``/``?`` (optionally followed by a
    closing quote or bracket) when the next word starts with an uppercase
    letter or an opening quote, unless the word carrying the period is in
    :data:`ABBREVIATIONS`.  A line break always ends a sentence, which covers
    headings and list items that carry no terminal punctuation.
    """
    return list(_build(text, tokenizer).sentences)


def make_document(text: str, tokenizer: Tokenizer | None = None) -> Document:
    return _build(text, tokenizer)

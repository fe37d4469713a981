"""Question-aware sentence selection under a token budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .providers import Embedder, embed_document, embed_question, pool_span
from .segmentation import Document, Tokenizer, make_document, tokenize


class CompressionError(ValueError):
    pass


class EmptyContextError(CompressionError):
    pass


class ZeroBudgetError(CompressionError):
    pass


def budget_from_ratio(ratio: float, original_tokens: int) -> int:
    """floor(ratio * L), with the ratio read as the decimal it was written as.

    Plain float products undershoot (0.7 * 90 == 62.99999...), which would
    silently shave a token off the budget.
    """
    return math.floor(Fraction(repr(float(ratio))) * original_tokens)


@dataclass
class CompressionRequest:
    context: Document
    question: str
    ratio: float | None = None
    budget_tokens: int | None = None

    def __post_init__(self):
        if (self.ratio is None) == (self.budget_tokens is None):
            raise CompressionError("set exactly one of ratio and budget_tokens")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise CompressionError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.budget_tokens is not None and self.budget_tokens < 1:
            raise CompressionError(f"budget_tokens must be >= 1, got {self.budget_tokens}")
        if not self.question or not self.question.strip():
            raise CompressionError("a non-empty question is required")

    @classmethod
    def from_text(cls, text: str, question: str, ratio=None, budget_tokens=None, tokenizer=None):
        return cls(make_document(text, tokenizer), question, ratio, budget_tokens)

    def budget(self) -> int:
        if self.budget_tokens is not None:
            return self.budget_tokens
        b = budget_from_ratio(self.ratio, self.context.token_count)
        if b == 0:
            raise ZeroBudgetError(f"floor({self.ratio} * {self.context.token_count}) is 0")
        return b


@dataclass(frozen=True)
class ScoredSentence:
    index: int
    score: float
    token_count: int


@dataclass
class CompressionResult:
    kept_indices: list[int]
    compressed_text: str
    original_tokens: int
    compressed_tokens: int
    realized_ratio: float
    truncated: bool
    budget: int
    scores: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kept_indices": self.kept_indices,
            "compressed_text": self.compressed_text,
            "original_tokens": self.original_tokens,
            "compressed_tokens": self.compressed_tokens,
            "realized_ratio": self.realized_ratio,
            "truncated": self.truncated,
            "budget": self.budget,
            "scores": self.scores,
        }


def score_sentences(
    req: CompressionRequest, embedder: Embedder, tokenizer: Tokenizer | None = None
) -> list[ScoredSentence]:
    """Cosine between the bare question and each sentence pooled in context."""
    doc = req.context
    if not doc.sentences:
        raise EmptyContextError("context has no sentences")
    Z = embed_document(embedder, [t.text for t in doc.tokens])
    q = embed_question(embedder, req.question, tokenizer)
    pooled = np.stack([pool_span(Z, *s.token_span) for s in doc.sentences])
    scores = np.clip(pooled @ q, -1.0, 1.0)
    return [ScoredSentence(k, float(scores[k]), s.token_count) for k, s in enumerate(doc.sentences)]


def rank(scored: Sequence[ScoredSentence]) -> list[ScoredSentence]:
    return sorted(scored, key=lambda s: (-s.score, s.index))


def select_under_budget(scored: Sequence[ScoredSentence], budget: int) -> list[int]:
    """Greedy by descending score, skipping sentences that no longer fit."""
    if budget < 1:
        raise CompressionError("budget must be >= 1")
    remaining = budget
    kept = []
    for s in rank(scored):
        if s.token_count <= remaining:
            kept.append(s.index)
            remaining -= s.token_count
            if remaining == 0:
                break
    return sorted(kept)


def _truncate(text: str, n_tokens: int, tokenizer: Tokenizer | None) -> str:
    toks = tokenize(text, tokenizer)
    return text[: toks[n_tokens - 1].end]


def compress(
    req: CompressionRequest, embedder: Embedder, tokenizer: Tokenizer | None = None
) -> CompressionResult:
    doc = req.context
    if not doc.sentences:
        raise EmptyContextError("context has no sentences")
    budget = req.budget()
    scored = score_sentences(req, embedder, tokenizer)
    kept = select_under_budget(scored, budget)
    truncated = False
    if kept:
        text = " ".join(doc.sentences[k].text for k in kept)
        n = sum(doc.sentences[k].token_count for k in kept)
    else:
        top = rank(scored)[0].index
        kept = [top]
        text = _truncate(doc.sentences[top].text, budget, tokenizer)
        n = budget
        truncated = True
    L = doc.token_count
    return CompressionResult(
        kept_indices=kept,
        compressed_text=text,
        original_tokens=L,
        compressed_tokens=n,
        realized_ratio=n / L if L else 0.0,
        truncated=truncated,
        budget=budget,
        scores=[s.score for s in scored],
    )

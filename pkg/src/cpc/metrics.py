"""Answer-quality metrics: ROUGE-L, token F1, edit similarity, keyword recall.

Normalization is fixed: lowercase, replace punctuation with spaces, collapse
whitespace.  Token F1 additionally drops the articles a/an/the.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}‘’“”–—…]")
_ARTICLES = {"a", "an", "the"}


@dataclass(frozen=True)
class MetricReport:
    name: str
    score: float
    details: dict = field(default_factory=dict)


def normalize_text(text: str) -> str:
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def _words(text: str) -> list[str]:
    return normalize_text(text).split()


def _f(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def lcs_length(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: str, hypothesis: str) -> MetricReport:
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref and not hyp:
        return MetricReport("rouge_l", 1.0, {"precision": 1.0, "recall": 1.0, "lcs": 0})
    if not ref or not hyp:
        return MetricReport("rouge_l", 0.0, {"precision": 0.0, "recall": 0.0, "lcs": 0})
    lcs = lcs_length(ref, hyp)
    p, r = lcs / len(hyp), lcs / len(ref)
    return MetricReport("rouge_l", _f(p, r), {"precision": p, "recall": r, "lcs": lcs})


def token_f1(reference: str, hypothesis: str) -> MetricReport:
    ref = [w for w in _words(reference) if w not in _ARTICLES]
    hyp = [w for w in _words(hypothesis) if w not in _ARTICLES]
    if not ref and not hyp:
        return MetricReport("token_f1", 1.0, {"precision": 1.0, "recall": 1.0})
    common = sum((Counter(ref) & Counter(hyp)).values())
    if common == 0:
        return MetricReport("token_f1", 0.0, {"precision": 0.0, "recall": 0.0})
    p, r = common / len(hyp), common / len(ref)
    return MetricReport("token_f1", _f(p, r), {"precision": p, "recall": r})


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_similarity(reference: str, hypothesis: str) -> MetricReport:
    longest = max(len(reference), len(hypothesis))
    if longest == 0:
        return MetricReport("edit_similarity", 1.0, {"distance": 0})
    d = levenshtein(reference, hypothesis)
    return MetricReport("edit_similarity", 1.0 - d / longest, {"distance": d})


def keyword_recall(gold_keywords: Iterable[str], extracted: Iterable[str]) -> MetricReport:
    gold = {normalize_text(k) for k in gold_keywords} - {""}
    if not gold:
        raise ValueError("gold keyword set is empty")
    found = {normalize_text(k) for k in extracted}
    hit = len(gold & found)
    return MetricReport("keyword_recall", hit / len(gold), {"matched": hit, "gold": len(gold)})

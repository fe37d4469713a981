"""Building (context, question, answer, positive, negatives) training tuples.

Per document: pick well-formed positive sentences, ask the generator for
question/answer pairs that need more than the positive to answer, keep the
pairs the generator itself judges unanswerable from the positive alone, then
choose negatives that are less question-similar than the positive and whose
removal barely moves the answer distribution.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np

from .providers import (
    DensityProvider,
    Embedder,
    GenerationProvider,
    answer_distributions,
    cosine,
    embed_text,
)
from .segmentation import Document, Sentence, Tokenizer, make_document

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-10


class CurationError(Exception):
    pass


class QAParseError(CurationError):
    pass


class AmbiguousVerdictError(CurationError):
    pass


@dataclass(frozen=True)
class CurationConfig:
    theta: float = 0.70
    beta: float = 0.30
    lam: float = 4e-3
    M: int = 2
    seed: int = 0
    max_positives: int = 4
    kl_with_question: bool = True

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.max_positives < 1:
            raise ValueError("max_positives must be >= 1")


# ---------------------------------------------------------------------------
# positive sampling


@lru_cache(maxsize=1)
def english_words() -> frozenset[str]:
    from english_words import get_english_words_set

    return frozenset(get_english_words_set(["web2", "gcide"], lower=True, alpha=True))


_SUFFIXES = (("ies", "y"), ("ied", "y"), ("es", ""), ("s", ""), ("ed", ""), ("ed", "e"), ("d", ""), ("ing", ""), ("ing", "e"), ("ly", ""))
_EDGE_PUNCT = "\"'()[]{}<>.,;:!?-–—“”‘’*"


def is_english_word(word: str) -> bool:
    words = english_words()
    w = word.lower()
    if w in words:
        return True
    for suf, repl in _SUFFIXES:
        if w.endswith(suf) and len(w) > len(suf) + 1 and w[: -len(suf)] + repl in words:
            return True
    return False


def is_consistent_sentence(s: Sentence | str, theta: float) -> bool:
    text = s.text if isinstance(s, Sentence) else s
    if not text.isascii():
        return False
    words = [w.strip(_EDGE_PUNCT) for w in text.split()]
    words = [w for w in words if w]
    if not words:
        return False
    hits = sum(is_english_word(w) for w in words)
    return hits >= theta * len(words)


# ---------------------------------------------------------------------------
# question generation and verification

QUESTION_PROMPT = (
    'Here is a text to consider: TEXT: "{text}"\n'
    "Read the sentence in double brackets, namely, [[{sentence}]].\n"
    "Ask questions to this sentence, and make sure the question is not answerable from this sentence "
    "alone without knowing the context.\n"
    "Reply in this format:\n"
    "Q: {{question 1}}\n"
    "A: {{answer 1}}\n"
    "Q: {{question 2}}\n"
    "A: {{answer 2}}"
)

VERIFICATION_PROMPT = (
    "You are given a piece of text, a question and an answer. Verify whether it is possible to derive "
    "such an answer by considering only the given piece of text (you should rely only on the piece of "
    'text). Think step by step and finish your thoughts with one word: "Yes" or "No". Answer "Yes" if '
    'and only if ALL the necessary information is contained in the text. If anything is missing, then '
    'state what is missing and answer "No". Answer "Yes" ONLY if there is no such information in the '
    'answer that is missing in the text. Otherwise, answer "No"!!\n'
    "{demonstration}\n"
    "Text: {sentence}\n"
    "Question: {question}\n"
    "Answer: {answer}\n"
    "Verification result:"
)

DEMONSTRATION = (
    "Text: She moved there after the war ended.\n"
    "Question: Which city did Marie Curie move to after the war?\n"
    "Answer: Paris\n"
    "Verification result: The text does not name the person or the city. No"
)


def render_question_prompt(context: Document | str, positive: Sentence | str) -> str:
    text = context.text if isinstance(context, Document) else context
    sentence = positive.text if isinstance(positive, Sentence) else positive
    return QUESTION_PROMPT.format(text=text, sentence=sentence)


def render_verification_prompt(positive: Sentence | str, question: str, answer: str) -> str:
    sentence = positive.text if isinstance(positive, Sentence) else positive
    return VERIFICATION_PROMPT.format(
        demonstration=DEMONSTRATION, sentence=sentence, question=question, answer=answer
    )


_QA_LINE = re.compile(r"^\s*(?:[-*]\s*)?\**\s*([QA])\s*\**\s*:\s*\**\s*(.*?)\s*$")


def parse_qa(response: str) -> list[tuple[str, str]]:
    """Pair each ``Q:`` line with the ``A:`` line that follows it."""
    pairs = []
    question = None
    for line in response.splitlines():
        m = _QA_LINE.match(line)
        if not m:
            continue
        tag, body = m.groups()
        if tag == "Q":
            question = body or None
        elif question is not None and body:
            pairs.append((question, body))
            question = None
    if not pairs:
        raise QAParseError("no complete Q/A pair in response")
    return pairs


def generate_qa(gen: GenerationProvider, context: Document, positive: Sentence) -> list[tuple[str, str]]:
    return parse_qa(gen.generate(render_question_prompt(context, positive)))


_LAST_WORD = re.compile(r"([A-Za-z]+)[^A-Za-z]*$")


def parse_verdict(response: str) -> bool:
    """True for a trailing "Yes", False for a trailing "No"."""
    m = _LAST_WORD.search(response)
    word = m.group(1).lower() if m else ""
    if word == "yes":
        return True
    if word == "no":
        return False
    raise AmbiguousVerdictError(f"response does not end in Yes/No: {response[-60:]!r}")


def verify_qa(gen: GenerationProvider, positive: Sentence | str, question: str, answer: str) -> bool:
    """Keep the pair only when the positive alone does NOT answer it."""
    return not parse_verdict(gen.generate(render_verification_prompt(positive, question, answer)))


# ---------------------------------------------------------------------------
# negative mining


@dataclass
class NegativeMining:
    eta: float
    candidates: list[int]
    similarities: list[float]
    excluded: bool


def coverage_ok(n_candidates: int, K: int, beta: float) -> bool:
    return n_candidates >= Fraction(repr(float(beta))) * K


def select_candidates(eta: float, similarities: Sequence[float], positive: int) -> list[int]:
    return [j for j, s in enumerate(similarities) if j != positive and s < eta]


def mine_negative_candidates(
    context: Document,
    positive: int,
    question: str,
    plain_embedder: Embedder,
    beta: float = 0.30,
    tokenizer: Tokenizer | None = None,
) -> NegativeMining:
    K = len(context.sentences)
    if K < 2:
        raise CurationError("negative mining needs at least two sentences")
    E_q = embed_text(plain_embedder, question, tokenizer)
    E = [embed_text(plain_embedder, s.text, tokenizer) for s in context.sentences]
    sims = [cosine(e, E_q) for e in E]
    eta = sims[positive]
    cands = select_candidates(eta, sims, positive)
    return NegativeMining(eta, cands, sims, excluded=not coverage_ok(len(cands), K, beta))


# ---------------------------------------------------------------------------
# KL filter


def kl_divergence(p: Sequence[float], q: Sequence[float], eps: float = KL_EPSILON) -> float:
    """KL(p || q) in nats with eps added to every entry of q.

    q is not renormalized after smoothing, so KL(p, p) comes out as a tiny
    negative number that the final clamp turns into exactly 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    q = q + eps
    mask = p > 0
    return max(0.0, float(np.sum(p[mask] * np.log(p[mask] / q[mask]))))


def context_without(context: Document, drop: int | None = None) -> str:
    return " ".join(s.text for k, s in enumerate(context.sentences) if k != drop)


def kl_score(
    density: DensityProvider, context: Document, question: str, answer: str, negative: int, with_question: bool = True
) -> float:
    q = question if with_question else ""
    full = answer_distributions(density, context_without(context), q, answer)
    reduced = answer_distributions(density, context_without(context, negative), q, answer)
    return float(np.mean([kl_divergence(a, b) for a, b in zip(full, reduced)]))


def kl_filter(
    density: DensityProvider,
    context: Document,
    question: str,
    answer: str,
    negative: int,
    lam: float = 4e-3,
    with_question: bool = True,
) -> tuple[float, bool]:
    score = kl_score(density, context, question, answer, negative, with_question)
    return score, score <= lam


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class CurationTuple:
    id: str
    context: Document
    question: str
    answer: str
    positive: int
    negatives: list[int]
    eta: float
    neg_cos: list[float]
    neg_kl: list[float]
    kl_with_question: bool = True

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "context": self.context.text,
            "question": self.question,
            "answer": self.answer,
            "positive": {"start_sent": self.positive},
            "negatives": [{"start_sent": n} for n in self.negatives],
            "scores": {
                "eta": self.eta,
                "neg_cos": self.neg_cos,
                "neg_kl": self.neg_kl,
                "kl_with_question": self.kl_with_question,
            },
        }


@dataclass
class Providers:
    generator: GenerationProvider
    plain_embedder: Embedder
    density: DensityProvider
    tokenizer: Tokenizer | None = field(default=None)


def _tuples_for_document(
    doc_index: int, doc_id: str, text: str, cfg: CurationConfig, prov: Providers
) -> list[CurationTuple]:
    context = make_document(text, prov.tokenizer)
    if len(context.sentences) < 2:
        return []
    positives = [k for k, s in enumerate(context.sentences) if is_consistent_sentence(s, cfg.theta)]
    out = []
    for pos in positives[: cfg.max_positives]:
        sentence = context.sentences[pos]
        try:
            pairs = generate_qa(prov.generator, context, sentence)
        except Exception as exc:  # one bad response must not stop the stream
            logger.warning("doc %s sentence %d: question generation failed: %s", doc_id, pos, exc)
            continue
        for pair_index, (question, answer) in enumerate(pairs):
            tag = f"{doc_id}:{pos}:{pair_index}"
            try:
                tup = _curate_pair(doc_index, tag, context, pos, pair_index, question, answer, cfg, prov)
            except Exception as exc:
                logger.warning("%s: skipped: %s", tag, exc)
                continue
            if tup is not None:
                out.append(tup)
    return out


def _curate_pair(doc_index, tag, context, pos, pair_index, question, answer, cfg, prov):
    if not verify_qa(prov.generator, context.sentences[pos], question, answer):
        logger.debug("%s: answerable from the positive alone", tag)
        return None
    mined = mine_negative_candidates(context, pos, question, prov.plain_embedder, cfg.beta, prov.tokenizer)
    if mined.excluded:
        logger.debug("%s: coverage exclusion (%d candidates)", tag, len(mined.candidates))
        return None
    survivors = []
    for j in mined.candidates:
        score, keep = kl_filter(prov.density, context, question, answer, j, cfg.lam, cfg.kl_with_question)
        if keep:
            survivors.append((j, score))
    if len(survivors) < cfg.M:
        logger.debug("%s: only %d negatives survive the KL filter", tag, len(survivors))
        return None
    rng = np.random.default_rng([cfg.seed, doc_index, pos, pair_index])
    picked = sorted(rng.choice(len(survivors), size=cfg.M, replace=False).tolist())
    chosen = [survivors[i] for i in picked]
    return CurationTuple(
        id=tag,
        context=context,
        question=question,
        answer=answer,
        positive=pos,
        negatives=[j for j, _ in chosen],
        eta=mined.eta,
        neg_cos=[mined.similarities[j] for j, _ in chosen],
        neg_kl=[s for _, s in chosen],
        kl_with_question=cfg.kl_with_question,
    )


def build_dataset(
    corpus: Iterable[dict | Document | str],
    cfg: CurationConfig,
    providers: Providers,
    workers: int = 1,
) -> Iterator[CurationTuple]:
    """Yield curated tuples document by document, in corpus order.

    Corpus items are ``{"id", "text"}`` records, documents, or raw strings.
    With ``workers > 1`` documents are processed concurrently but results are
    still yielded in corpus order.
    """

    def unpack(item):
        k, doc = item
        if isinstance(doc, dict):
            return k, str(doc.get("id", k)), doc["text"]
        if isinstance(doc, Document):
            return k, str(k), doc.text
        return k, str(k), doc

    jobs = (unpack(item) for item in enumerate(corpus))
    run = lambda job: _tuples_for_document(*job, cfg, providers)  # noqa: E731
    if workers <= 1:
        for job in jobs:
            yield from run(job)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for tuples in pool.map(run, jobs):
            yield from tuples


def write_jsonl(records: Iterable[dict], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


# ---------------------------------------------------------------------------
# validation


def validate_record(
    rec: dict, lam: float | None = None, M: int | None = None, tokenizer: Tokenizer | None = None
) -> list[str]:
    """Return the invariant violations of one dataset record (empty if valid)."""
    problems = []
    try:
        K = len(make_document(rec["context"], tokenizer).sentences)
        pos = int(rec["positive"]["start_sent"])
        negs = [int(n["start_sent"]) for n in rec["negatives"]]
        scores = rec["scores"]
        eta = float(scores["eta"])
        neg_cos = [float(x) for x in scores["neg_cos"]]
        neg_kl = [float(x) for x in scores["neg_kl"]]
        if not rec["question"] or not rec["answer"]:
            problems.append("empty question or answer")
    except (KeyError, TypeError, ValueError) as exc:
        return [f"malformed record: {exc!r}"]
    if not 0 <= pos < K:
        problems.append(f"positive index {pos} outside 0..{K - 1}")
    for n in negs:
        if not 0 <= n < K:
            problems.append(f"negative index {n} outside 0..{K - 1}")
    if pos in negs:
        problems.append(f"positive index {pos} appears among negatives")
    if len(set(negs)) != len(negs):
        problems.append("negatives are not pairwise distinct")
    if M is not None and len(negs) != M:
        problems.append(f"expected {M} negatives, found {len(negs)}")
    if len(neg_cos) != len(negs) or len(neg_kl) != len(negs):
        problems.append("score lists do not match the negatives")
    for n, c in zip(negs, neg_cos):
        if not c < eta:
            problems.append(f"negative {n} cosine {c:.6g} is not below eta {eta:.6g}")
    if lam is not None:
        for n, kl in zip(negs, neg_kl):
            if kl > lam:
                problems.append(f"negative {n} KL {kl:.6g} exceeds lambda {lam:.6g}")
    return problems


def validate_file(path, lam: float | None = None, M: int | None = None) -> list[tuple[int, str]]:
    failures = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError as exc:
                failures.append((lineno, f"invalid JSON: {exc}"))
                continue
            failures.extend((lineno, p) for p in validate_record(rec, lam, M))
    return failures

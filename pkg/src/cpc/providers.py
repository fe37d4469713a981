"""Model roles used by compression and curation.

Three roles are needed: a context-aware token embedder (used both for
contexts and for bare questions), a text generator for question synthesis and
verification, and an answer-density scorer that exposes full next-token
distributions.  Each has an offline reference implementation here plus an
HTTP client for the first two.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .segmentation import Tokenizer, tokenize

logger = logging.getLogger(__name__)

EMBED_URL_ENV = "CPC_EMBED_URL"
LLM_URL_ENV = "CPC_LLM_URL"
API_KEY_ENV = "CPC_API_KEY"

DEGENERATE_NORM = 1e-12


class ProviderError(Exception):
    """Base class for provider failures."""


class ContextOverflowError(ProviderError):
    pass


class TransportError(ProviderError):
    pass


class RateLimitError(TransportError):
    """HTTP 429; safe to retry."""


class DegenerateSpanError(ProviderError):
    pass


class EmptyQuestionError(ProviderError):
    pass


class UnsupportedProviderError(ProviderError):
    pass


class Embedder(Protocol):
    max_tokens: int | None

    def embed_document(self, tokens: Sequence[str]) -> np.ndarray: ...


class GenerationProvider(Protocol):
    def generate(self, prompt: str) -> str: ...


class DensityProvider(Protocol):
    def answer_distributions(self, context: str, question: str, answer: str) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# pooling and similarity


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < DEGENERATE_NORM:
        raise DegenerateSpanError(f"vector norm {n:.3g} below {DEGENERATE_NORM}")
    return v / n


def pool_span(emb: np.ndarray, i: int, j: int) -> np.ndarray:
    """Unit-normalized mean of token vectors ``emb[i..j]`` (inclusive)."""
    if not 0 <= i <= j < len(emb):
        raise IndexError(f"span ({i}, {j}) outside 0..{len(emb) - 1}")
    return normalize(emb[i : j + 1].mean(axis=0))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom < DEGENERATE_NORM:
        raise DegenerateSpanError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def embed_document(embedder: Embedder, tokens: Sequence[str]) -> np.ndarray:
    if not tokens:
        raise ValueError("cannot embed an empty token list")
    limit = embedder.max_tokens
    if limit is not None and len(tokens) > limit:
        raise ContextOverflowError(f"{len(tokens)} tokens exceed provider limit {limit}")
    out = np.asarray(embedder.embed_document(tokens), dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != len(tokens):
        raise ProviderError(f"expected {len(tokens)} token vectors, got shape {out.shape}")
    return out


def embed_text(embedder: Embedder, text: str, tokenizer: Tokenizer | None = None) -> np.ndarray:
    """Embed ``text`` on its own (no surrounding context) and pool all tokens."""
    toks = [t.text for t in tokenize(text, tokenizer)]
    if not toks:
        raise EmptyQuestionError("text has no tokens")
    return pool_span(embed_document(embedder, toks), 0, len(toks) - 1)


def embed_question(embedder: Embedder, question: str, tokenizer: Tokenizer | None = None) -> np.ndarray:
    return embed_text(embedder, question, tokenizer)


# ---------------------------------------------------------------------------
# embedders


class HashEncoder:
    """Deterministic offline encoder for tests and benchmarks.

    Each token gets a fixed Gaussian vector seeded from a hash of its
    lowercased form; the output at position t is that vector plus
    ``context_weight`` times the document mean, so every output depends on the
    whole input while the cost stays linear in its length.
    """

    max_tokens: int | None = None

    def __init__(self, dim: int = 64, context_weight: float = 0.25, salt: str = "cpc"):
        self.dim = dim
        self.context_weight = context_weight
        self.salt = salt
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def token_vector(self, token: str) -> np.ndarray:
        key = token.lower()
        vec = self._cache.get(key)
        if vec is None:
            digest = hashlib.blake2b(f"{self.salt}\x00{key}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec.setflags(write=False)
            with self._lock:
                self._cache.setdefault(key, vec)
        return vec

    def embed_document(self, tokens: Sequence[str]) -> np.ndarray:
        base = np.stack([self.token_vector(t) for t in tokens])
        return base + self.context_weight * base.mean(axis=0)


class RemoteEncoder:
    """Client for an HTTP token-embedding service.

    Request ``{"tokens": [...]}`` or ``{"text": "..."}``; response
    ``{"vectors": [[...], ...]}``.  At most ``max_parallel`` requests are in
    flight at once per client.
    """

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        max_tokens: int | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_parallel: int = 4,
        session: requests.Session | None = None,
    ):
        self.url = url or os.environ.get(EMBED_URL_ENV)
        if not self.url:
            raise ValueError(f"no embedder URL given and {EMBED_URL_ENV} is unset")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_tokens = max_tokens
        self._http = _JsonClient(self.url, self.api_key, timeout, retries, backoff, max_parallel, session)

    def embed_document(self, tokens: Sequence[str]) -> np.ndarray:
        body = self._http.post({"tokens": list(tokens)})
        return _vectors(body)

    def embed_text(self, text: str) -> np.ndarray:
        """Server-side tokenization; the returned rows are mean-pooled."""
        return normalize(_vectors(self._http.post({"text": text})).mean(axis=0))


def _vectors(body: Mapping) -> np.ndarray:
    try:
        return np.asarray(body["vectors"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProviderError(f"malformed embedder response: {exc}") from exc


class _JsonClient:
    def __init__(self, url, api_key, timeout, retries, backoff, max_parallel, session):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_parallel)
        self._session = session or requests.Session()
        self._headers = {"Content-Type": "application/json; charset=utf-8"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"

    def post(self, payload: dict) -> dict:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._session.post(self.url, data=data, headers=self._headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = TransportError(f"{self.url}: {exc}")
                continue
            if resp.status_code == 429:
                last = RateLimitError(f"{self.url}: rate limited")
                continue
            if resp.status_code >= 500:
                last = TransportError(f"{self.url}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return json.loads(resp.content.decode("utf-8"))
            except ValueError as exc:
                raise ProviderError(f"{self.url}: invalid JSON response") from exc
        logger.warning("giving up on %s after %d attempts", self.url, self.retries + 1)
        assert last is not None
        raise last


# ---------------------------------------------------------------------------
# generators


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ScriptedGenerator:
    """Replays canned completions keyed by the SHA-256 of the prompt."""

    def __init__(self, responses: Mapping[str, str], default: str | None = None):
        self.responses = dict(responses)
        self.default = default

    @classmethod
    def from_prompts(cls, pairs: Mapping[str, str], default: str | None = None) -> "ScriptedGenerator":
        return cls({prompt_key(p): r for p, r in pairs.items()}, default)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedGenerator":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(data["responses"], data.get("default"))

    def generate(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("empty prompt")
        try:
            return self.responses[prompt_key(prompt)]
        except KeyError:
            if self.default is not None:
                return self.default
            raise ProviderError(f"no scripted response for prompt {prompt_key(prompt)[:12]}") from None


class RemoteGenerator:
    """Request ``{"prompt", "max_tokens"}``, response ``{"text"}``."""

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        max_tokens: int = 512,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_parallel: int = 4,
        session: requests.Session | None = None,
    ):
        self.url = url or os.environ.get(LLM_URL_ENV)
        if not self.url:
            raise ValueError(f"no generator URL given and {LLM_URL_ENV} is unset")
        api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_tokens = max_tokens
        self._http = _JsonClient(self.url, api_key, timeout, retries, backoff, max_parallel, session)

    def generate(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("empty prompt")
        body = self._http.post({"prompt": prompt, "max_tokens": self.max_tokens})
        try:
            return str(body["text"])
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed generator response: {exc}") from exc


def generate(provider: GenerationProvider, prompt: str) -> str:
    return provider.generate(prompt)


# ---------------------------------------------------------------------------
# answer densities

UNK = "<unk>"


def _words(text: str, tokenizer: Tokenizer | None = None) -> list[str]:
    return [t.text.lower() for t in tokenize(text, tokenizer)]


class _ToyDensity:
    def __init__(self, vocabulary: Iterable[str], alpha: float = 0.1, tokenizer: Tokenizer | None = None):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        words = sorted({w.lower() for w in vocabulary} - {UNK})
        self.vocab = [UNK, *words]
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.alpha = alpha
        self.tokenizer = tokenizer

    @classmethod
    def from_corpus(cls, texts: Iterable[str], alpha: float = 0.1, tokenizer: Tokenizer | None = None):
        vocab: set[str] = set()
        for text in texts:
            vocab.update(_words(text, tokenizer))
        return cls(vocab, alpha, tokenizer)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def ids(self, text: str) -> list[int]:
        return [self.index.get(w, 0) for w in _words(text, self.tokenizer)]

    def _prefix(self, context: str, question: str) -> list[int]:
        return self.ids(context) + (self.ids(question) if question else [])


class UnigramDensity(_ToyDensity):
    """Add-alpha unigram model of the conditioning text; same at every position."""

    def answer_distributions(self, context: str, question: str, answer: str) -> np.ndarray:
        n = len(self.ids(answer))
        if n == 0:
            raise ValueError("answer has no tokens")
        counts = np.bincount(self._prefix(context, question), minlength=self.vocab_size).astype(np.float64)
        dist = (counts + self.alpha) / (counts.sum() + self.alpha * self.vocab_size)
        return np.tile(dist, (n, 1))


class BigramDensity(_ToyDensity):
    """Add-alpha bigram model estimated on the conditioning text.

    Position t of the answer is predicted from the previous token under teacher
    forcing; position 0 uses the last token of context + question.
    """

    def answer_distributions(self, context: str, question: str, answer: str) -> np.ndarray:
        ans = self.ids(answer)
        if not ans:
            raise ValueError("answer has no tokens")
        prefix = self._prefix(context, question)
        follow: dict[int, Counter] = {}
        for a, b in zip(prefix, prefix[1:]):
            follow.setdefault(a, Counter())[b] += 1
        prevs = [prefix[-1] if prefix else 0, *ans[:-1]]
        out = np.empty((len(ans), self.vocab_size))
        for t, prev in enumerate(prevs):
            row = np.full(self.vocab_size, self.alpha)
            for w, c in follow.get(prev, {}).items():
                row[w] += c
            out[t] = row / row.sum()
        return out


def answer_distributions(provider, context: str, question: str, answer: str) -> np.ndarray:
    fn = getattr(provider, "answer_distributions", None)
    if fn is None:
        raise UnsupportedProviderError(f"{type(provider).__name__} does not expose token distributions")
    return np.asarray(fn(context, question, answer), dtype=np.float64)

"""Context-aware, sentence-level prompt compression."""

__version__ = "0.1.0"

from .compressor import CompressionRequest, CompressionResult, compress, score_sentences, select_under_budget
from .providers import HashEncoder, cosine, embed_question, pool_span
from .segmentation import Document, Sentence, count_tokens, make_document, split_sentences

__all__ = [
    "CompressionRequest",
    "CompressionResult",
    "Document",
    "HashEncoder",
    "Sentence",
    "compress",
    "cosine",
    "count_tokens",
    "embed_question",
    "make_document",
    "pool_span",
    "score_sentences",
    "select_under_budget",
    "split_sentences",
]

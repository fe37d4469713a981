"""Static relevance heatmap and latency summaries."""

from __future__ import annotations

import html
import statistics
import time
from typing import Sequence

from .compressor import CompressionRequest, compress
from .providers import Embedder
from .segmentation import Document


def render_heatmap(doc: Document, scores: Sequence[float], question: str, kept: Sequence[int] = ()) -> str:
    """Standalone HTML page shading each sentence by its relevance score.

    Scores are min-max scaled within the document; kept sentences are
    underlined.
    """
    if len(scores) != len(doc.sentences):
        raise ValueError("one score per sentence required")
    lo, hi = (min(scores), max(scores)) if scores else (0.0, 0.0)
    span = hi - lo
    kept = set(kept)
    parts = []
    gaps = doc.separators()
    for k, (s, score) in enumerate(zip(doc.sentences, scores)):
        alpha = (score - lo) / span if span > 0 else 1.0
        style = f"background-color: rgba(220, 60, 30, {0.08 + 0.82 * alpha:.3f});"
        if k in kept:
            style += " text-decoration: underline;"
        parts.append(html.escape(gaps[k]).replace("\n", "<br>\n"))
        parts.append(
            f'<span class="s" data-index="{k}" data-score="{score:.6f}" style="{style}" '
            f'title="#{k} score {score:.4f}">{html.escape(s.text)}</span>'
        )
    parts.append(html.escape(gaps[-1]).replace("\n", "<br>\n"))
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Sentence relevance</title>\n"
        "<style>body{font-family:sans-serif;max-width:52em;margin:2em auto;line-height:1.6}"
        ".q{font-weight:bold;margin-bottom:1em}.s{padding:1px 2px;border-radius:3px}</style></head>\n"
        f"<body><div class=\"q\">Question: {html.escape(question)}</div>\n<div>{''.join(parts)}</div>\n"
        "</body></html>\n"
    )


def time_compress(
    req: CompressionRequest, embedder: Embedder, repeats: int = 1, warmup: int = 1
) -> list[float]:
    """Wall-clock seconds of ``compress`` per repeat, after ``warmup`` untimed runs."""
    for _ in range(warmup):
        compress(req, embedder)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        compress(req, embedder)
        times.append(time.perf_counter() - t0)
    return times


def latency_summary(seconds: Sequence[float]) -> dict:
    if not seconds:
        raise ValueError("no timings")
    return {"avg_seconds": statistics.fmean(seconds), "median_seconds": statistics.median(seconds), "n": len(seconds)}


def length_table(tokens: Sequence[int], seconds: Sequence[float], buckets: int = 8) -> list[dict]:
    """Mean time per context-length bucket (equal-width on token count)."""
    if not tokens:
        return []
    lo, hi = min(tokens), max(tokens)
    width = max(1, -(-(hi - lo + 1) // buckets))
    rows: dict[int, list[float]] = {}
    for n, s in zip(tokens, seconds):
        rows.setdefault((n - lo) // width, []).append(s)
    return [
        {
            "tokens_from": lo + k * width,
            "tokens_to": lo + (k + 1) * width - 1,
            "count": len(v),
            "avg_seconds": statistics.fmean(v),
        }
        for k, v in sorted(rows.items())
    ]

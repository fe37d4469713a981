"""``cpc`` command line: compress, curate, train-toy, eval, bench, validate-dataset."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .compressor import CompressionRequest, compress
from .curation import CurationConfig, Providers, build_dataset, read_jsonl, validate_file, write_jsonl
from .metrics import edit_similarity, keyword_recall, rouge_l, token_f1
from .providers import (
    API_KEY_ENV,
    EMBED_URL_ENV,
    LLM_URL_ENV,
    BigramDensity,
    HashEncoder,
    RemoteEncoder,
    RemoteGenerator,
    ScriptedGenerator,
    UnigramDensity,
)
from .report import latency_summary, length_table, render_heatmap, time_compress
from .segmentation import make_document
from .trainer import TrainConfig, ToyEncoder, save_checkpoint, train, write_log

logger = logging.getLogger("cpc")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, extra: dict | None = None) -> dict:
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "api_key") and not callable(v)
    }
    out = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": {"cpc": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    if extra:
        out.update(extra)
    return out


def _fraction(name):
    def parse(s):
        v = float(s)
        if not 0 < v <= 1:
            raise argparse.ArgumentTypeError(f"{name} must be in (0, 1]")
        return v

    return parse


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _load_corpus(path) -> list[dict]:
    if not Path(path).exists():
        raise UsageError(f"corpus file not found: {path}")
    records = list(read_jsonl(path))
    for k, r in enumerate(records):
        if "text" not in r:
            raise UsageError(f"{path}: line {k + 1} has no 'text' field")
    return records


def make_embedder(choice: str, url: str | None = None, api_key: str | None = None):
    if choice == "test":
        return HashEncoder()
    if choice == "remote":
        return RemoteEncoder(url=url or os.environ.get(EMBED_URL_ENV), api_key=api_key)
    if choice.startswith("toy:"):
        return ToyEncoder.load(choice[4:])
    raise UsageError(f"unknown encoder {choice!r} (expected test, remote or toy:<checkpoint>)")


def _add_encoder_flags(p):
    p.add_argument("--encoder", default="test", help="test | remote | toy:<checkpoint> (default: test)")
    p.add_argument("--embed-url", default=None, help=f"remote embedder URL (overrides ${EMBED_URL_ENV})")
    p.add_argument("--api-key", default=None, help=f"API key (overrides ${API_KEY_ENV})")


# ---------------------------------------------------------------------------
# commands


def cmd_compress(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"input file not found: {path}")
    text = path.read_text(encoding="utf-8")
    embedder = make_embedder(args.encoder, args.embed_url, args.api_key)
    req = CompressionRequest(make_document(text), args.question, args.ratio, args.budget_tokens)
    result = compress(req, embedder)
    payload = {"question": args.question, **result.to_dict()}
    if args.out:
        _write_json(args.out, payload)
        _write_json(f"{args.out}.manifest.json", _manifest(args))
    else:
        json.dump(payload, sys.stdout, ensure_ascii=False, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    if args.heatmap:
        Path(args.heatmap).write_text(
            render_heatmap(req.context, result.scores, args.question, result.kept_indices), encoding="utf-8"
        )
    return 0


def cmd_bench(args) -> int:
    corpus = _load_corpus(args.corpus)
    if not corpus:
        raise UsageError(f"corpus {args.corpus} is empty")
    embedder = make_embedder(args.encoder, args.embed_url, args.api_key)
    rows = []
    for k, rec in enumerate(corpus):
        question = rec.get("question") or args.question
        if not question:
            raise UsageError(f"document {rec.get('id', k)} has no question and --question was not given")
        req = CompressionRequest(make_document(rec["text"]), question, ratio=args.ratio)
        times = time_compress(req, embedder, repeats=args.repeats, warmup=args.warmup)
        rows.append(
            {
                "id": str(rec.get("id", k)),
                "tokens": req.context.token_count,
                "sentences": len(req.context.sentences),
                "seconds": statistics.median(times),
            }
        )
    seconds = [r["seconds"] for r in rows]
    report = {
        **latency_summary(seconds),
        "documents": rows,
        "length_vs_time": length_table([r["tokens"] for r in rows], seconds, args.buckets),
    }
    if args.out:
        _write_json(args.out, report)
        _write_json(f"{args.out}.manifest.json", _manifest(args))
    print(f"{len(rows)} documents  avg {report['avg_seconds'] * 1e3:.2f} ms  median {report['median_seconds'] * 1e3:.2f} ms")
    return 0


def _make_generator(args):
    choice = args.llm
    if choice.startswith("scripted:"):
        return ScriptedGenerator.from_file(choice[len("scripted:") :])
    if choice == "remote":
        return RemoteGenerator(url=args.llm_url or os.environ.get(LLM_URL_ENV), api_key=args.api_key)
    raise UsageError(f"unknown --llm {choice!r} (expected scripted:<file> or remote)")


def cmd_curate(args) -> int:
    corpus = _load_corpus(args.corpus)
    cfg = CurationConfig(
        theta=args.theta,
        beta=args.beta,
        lam=args.lam,
        M=args.negatives,
        seed=args.seed,
        max_positives=args.max_positives,
        kl_with_question=not args.kl_without_question,
    )
    density_cls = {"bigram": BigramDensity, "unigram": UnigramDensity}[args.density]
    density = density_cls.from_corpus([r["text"] for r in corpus], alpha=args.density_alpha)
    plain = make_embedder(args.plain_encoder, args.embed_url, args.api_key)
    providers = Providers(_make_generator(args), plain, density)
    n = write_jsonl((t.to_record() for t in build_dataset(corpus, cfg, providers, workers=args.workers)), args.out)
    _write_json(f"{args.out}.manifest.json", _manifest(args, {"tuples": n, "documents": len(corpus)}))
    print(f"wrote {n} tuples from {len(corpus)} documents to {args.out}")
    return 0


def cmd_train(args) -> int:
    if not Path(args.dataset).exists():
        raise UsageError(f"dataset not found: {args.dataset}")
    records = list(read_jsonl(args.dataset))
    if not records:
        raise UsageError(f"dataset {args.dataset} is empty")
    cfg = TrainConfig(
        B=args.batch_size,
        M=args.negatives,
        delta=args.delta,
        lr=args.lr,
        steps=args.steps,
        seed=args.seed,
        temperature=args.temperature,
        literal_double_exp=args.literal_double_exp,
        dim=args.dim,
        mntp_mode=args.mntp_mode,
        use_mntp=not args.no_mntp,
        eval_every=args.eval_every,
        holdout=args.holdout,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(records, cfg)
    save_checkpoint(out / "checkpoint.json", result.params, result.vocab, cfg)
    write_log(out / "train_log.csv", result.log)
    summary = {
        "initial_accuracy": result.initial_accuracy,
        "final_accuracy": result.final_accuracy,
        "train_records": len(result.train_ids),
        "heldout_records": len(result.heldout_ids),
        "vocab_size": len(result.vocab),
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(args))
    print(f"held-out retrieval accuracy {result.initial_accuracy:.3f} -> {result.final_accuracy:.3f}")
    return 0


def _read_answers(path) -> list[dict]:
    if not Path(path).exists():
        raise UsageError(f"file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError:
                rec = line.rstrip("\n")
            if not isinstance(rec, dict):
                rec = {"text": str(rec)}
            rec.setdefault("id", str(k))
            rows.append(rec)
    return rows


def cmd_eval(args) -> int:
    refs = _read_answers(args.references)
    preds = {str(r["id"]): r for r in _read_answers(args.predictions)}
    items = []
    for ref in refs:
        rid = str(ref["id"])
        if rid not in preds:
            raise UsageError(f"no prediction for id {rid}")
        hyp = preds[rid]
        row = {
            "id": rid,
            "rouge_l": rouge_l(ref.get("text", ""), hyp.get("text", "")).score,
            "token_f1": token_f1(ref.get("text", ""), hyp.get("text", "")).score,
            "edit_similarity": edit_similarity(ref.get("text", ""), hyp.get("text", "")).score,
        }
        if ref.get("keywords"):
            row["keyword_recall"] = keyword_recall(ref["keywords"], hyp.get("keywords", [])).score
        items.append(row)
    if not items:
        raise UsageError("no reference items")
    report = {"n": len(items), "per_item": items}
    for name in ("rouge_l", "token_f1", "edit_similarity", "keyword_recall"):
        vals = [r[name] for r in items if name in r]
        if vals:
            report[name] = statistics.fmean(vals)
    if args.out:
        _write_json(args.out, report)
        _write_json(f"{args.out}.manifest.json", _manifest(args))
    for name in ("rouge_l", "token_f1", "edit_similarity", "keyword_recall"):
        if name in report:
            print(f"{name:16s} {report[name]:.4f}")
    return 0


def cmd_validate(args) -> int:
    if not Path(args.dataset).exists():
        raise UsageError(f"dataset not found: {args.dataset}")
    failures = validate_file(args.dataset, lam=args.lam, M=args.negatives)
    for lineno, problem in failures:
        print(f"{args.dataset}:{lineno}: {problem}")
    if args.out:
        _write_json(args.out, {"valid": not failures, "failures": [{"line": l, "problem": p} for l, p in failures]})
        _write_json(f"{args.out}.manifest.json", _manifest(args))
    if failures:
        print(f"{len(failures)} problem(s) found", file=sys.stderr)
        return 1
    print("dataset valid")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpc", description="Context-aware sentence-level prompt compression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a context for a question")
    p.add_argument("--input", required=True, help="UTF-8 text file holding the context")
    p.add_argument("--question", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ratio", type=_fraction("--ratio"), help="target ratio tau in (0, 1]")
    g.add_argument("--budget-tokens", type=_positive_int)
    _add_encoder_flags(p)
    p.add_argument("--out", help="result JSON (default: stdout)")
    p.add_argument("--heatmap", help="also write a standalone HTML relevance heatmap")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("bench", help="time compression over a corpus")
    p.add_argument("--corpus", required=True, help='JSONL of {"id", "text", "question"?}')
    p.add_argument("--question", help="question for documents without one")
    p.add_argument("--ratio", type=_fraction("--ratio"), default=1 / 3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--repeats", type=_positive_int, default=1)
    p.add_argument("--buckets", type=_positive_int, default=8)
    _add_encoder_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("curate", help="build a (context, question, answer, positive, negatives) dataset from a corpus")
    p.add_argument("--corpus", required=True, help='JSONL of {"id", "text"}')
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=_fraction("--theta"), default=0.70)
    p.add_argument("--beta", type=_fraction("--beta"), default=0.30)
    p.add_argument("--lambda", dest="lam", type=float, default=4e-3)
    p.add_argument("--negatives", type=_positive_int, default=2)
    p.add_argument("--max-positives", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--llm", default="remote", help="scripted:<responses.json> | remote")
    p.add_argument("--llm-url", default=None, help=f"overrides ${LLM_URL_ENV}")
    p.add_argument("--density", choices=["bigram", "unigram"], default="bigram")
    p.add_argument("--density-alpha", type=float, default=0.1)
    p.add_argument("--plain-encoder", default="test", help="test | remote")
    p.add_argument("--embed-url", default=None)
    p.add_argument("--api-key", default=None)
    p.add_argument("--kl-without-question", action="store_true")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train-toy", help="train the toy context-aware encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--negatives", type=_positive_int, default=2)
    p.add_argument("--delta", type=float, default=0.80)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--literal-double-exp", action="store_true")
    p.add_argument("--mntp-mode", choices=["next", "same"], default="next")
    p.add_argument("--no-mntp", action="store_true")
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--references", required=True, help='JSONL of {"id", "text", "keywords"?} or plain lines')
    p.add_argument("--predictions", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate-dataset", help="check every tuple invariant in a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=4e-3)
    p.add_argument("--negatives", type=_positive_int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        logger.debug("command failed", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from cli_fixtures import write_corpus, write_responses

from cpc.cli import main
from cpc.segmentation import count_tokens
from cpc.synthetic import synthetic_records
from cpc.trainer import PARAM_NAMES, ToyEncoderParams, load_checkpoint

DATA = Path(__file__).parent / "data"


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# compress


def test_compress_matches_golden(tmp_path):
    out = tmp_path / "res.json"
    src = DATA / "sample_context.txt"
    before = digest(src)
    assert run("compress", "--input", src, "--question", "Who restored the astrolabe?", "--ratio", "0.5", "--out", out) == 0
    got = json.loads(out.read_text())
    golden = json.loads((DATA / "compress_golden.json").read_text())
    scores, golden_scores = got.pop("scores"), golden.pop("scores")
    assert got == golden
    np.testing.assert_allclose(scores, golden_scores, atol=1e-12)
    manifest = json.loads((tmp_path / "res.json.manifest.json").read_text())
    assert manifest["command"] == "compress" and manifest["config"]["ratio"] == 0.5
    assert digest(src) == before


def test_compress_ratio_and_budget_conflict(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("compress", "--input", DATA / "sample_context.txt", "--question", "q?", "--ratio", "0.5", "--budget-tokens", "5")
    assert exc.value.code == 2
    assert "not allowed with" in capsys.readouterr().err


def test_compress_large_document_under_budget(tmp_path):
    rng = np.random.default_rng(0)
    words = "harbor river stone field lamp garden window market".split()
    sentences = []
    while sum(count_tokens(s) for s in sentences) < 1000:
        w = list(rng.choice(words, size=int(rng.integers(4, 12))))
        sentences.append(" ".join(w).capitalize() + ".")
    text = " ".join(sentences)
    src = tmp_path / "doc.txt"
    src.write_text(text)
    L = count_tokens(text)
    out = tmp_path / "r.json"
    assert run("compress", "--input", src, "--question", "Where is the lamp?", "--ratio", "0.2", "--out", out) == 0
    res = json.loads(out.read_text())
    assert res["original_tokens"] == L >= 1000
    assert res["compressed_tokens"] <= L // 5
    assert count_tokens(res["compressed_text"]) == res["compressed_tokens"]


def test_compress_heatmap(tmp_path):
    html = tmp_path / "h.html"
    assert run("compress", "--input", DATA / "sample_context.txt", "--question", "Who restored it?",
               "--budget-tokens", "20", "--out", tmp_path / "r.json", "--heatmap", html) == 0
    page = html.read_text()
    assert page.startswith("<!DOCTYPE html>")
    assert page.count('class="s"') == 8
    assert "underline" in page


def test_compress_structured_errors(tmp_path, capsys):
    src = tmp_path / "tiny.txt"
    src.write_text("Tiny one.")
    assert run("compress", "--input", src, "--question", "q?", "--ratio", "0.1") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ZeroBudgetError"
    with pytest.raises(SystemExit) as exc:
        run("compress", "--input", tmp_path / "missing.txt", "--question", "q?", "--ratio", "0.5")
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("compress", "--input", src, "--question", "q?", "--ratio", "1.5")


def test_compress_with_toy_checkpoint(tmp_path):
    ds = tmp_path / "syn.jsonl"
    write_lines(ds, synthetic_records(8))
    assert run("train-toy", "--dataset", ds, "--out", tmp_path / "m", "--steps", "2", "--batch-size", "4", "--dim", "8") == 0
    out = tmp_path / "r.json"
    assert run("compress", "--input", DATA / "sample_context.txt", "--question", "Who restored it?",
               "--ratio", "0.5", "--encoder", f"toy:{tmp_path / 'm' / 'checkpoint.json'}", "--out", out) == 0
    assert json.loads(out.read_text())["compressed_tokens"] <= 37


# ---------------------------------------------------------------------------
# bench


def test_bench_single_document(tmp_path):
    corpus = tmp_path / "c.jsonl"
    write_lines(corpus, [{"id": "a", "text": (DATA / "sample_context.txt").read_text(), "question": "Who?"}])
    out = tmp_path / "bench.json"
    assert run("bench", "--corpus", corpus, "--out", out, "--repeats", "3") == 0
    rep = json.loads(out.read_text())
    assert rep["n"] == 1
    assert rep["avg_seconds"] == rep["median_seconds"] == rep["documents"][0]["seconds"]
    assert rep["length_vs_time"][0]["count"] == 1
    assert (tmp_path / "bench.json.manifest.json").exists()


def test_bench_empty_corpus(tmp_path):
    corpus = tmp_path / "c.jsonl"
    corpus.write_text("")
    with pytest.raises(SystemExit) as exc:
        run("bench", "--corpus", corpus, "--question", "q?")
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# curate, train, validate, eval


def curate(tmp_path, name, *extra):
    corpus, responses = tmp_path / "corpus.jsonl", tmp_path / "responses.json"
    if not corpus.exists():
        write_corpus(corpus)
        write_responses(responses)
    out = tmp_path / name
    assert run("curate", "--corpus", corpus, "--out", out, "--llm", f"scripted:{responses}", *extra) == 0
    return out


def test_curate_is_deterministic_and_valid(tmp_path):
    a = curate(tmp_path, "a.jsonl")
    b = curate(tmp_path, "b.jsonl", "--workers", "3")
    assert a.read_bytes() == b.read_bytes()
    recs = [json.loads(line) for line in a.read_text().splitlines()]
    assert len(recs) > 0
    assert all(r["id"].endswith(":0") for r in recs)  # only the "No"-verdict pairs survive
    assert run("validate-dataset", "--dataset", a) == 0
    manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert manifest["tuples"] == len(recs) and manifest["seed"] == 0
    assert "api_key" not in manifest["config"]


def test_curate_inputs_untouched(tmp_path):
    curate(tmp_path, "a.jsonl")
    before = {p: digest(tmp_path / p) for p in ("corpus.jsonl", "responses.json")}
    curate(tmp_path, "b.jsonl")
    assert before == {p: digest(tmp_path / p) for p in before}


def test_validate_reports_corrupted_line(tmp_path, capsys):
    ds = curate(tmp_path, "a.jsonl")
    lines = ds.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["negatives"][0]["start_sent"] = rec["positive"]["start_sent"]
    lines[0] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert run("validate-dataset", "--dataset", bad, "--out", tmp_path / "v.json") == 1
    out = capsys.readouterr().out
    assert f"{bad}:1: positive index" in out
    report = json.loads((tmp_path / "v.json").read_text())
    assert not report["valid"] and report["failures"][0]["line"] == 1


def test_train_zero_steps_checkpoint_equals_init(tmp_path):
    ds = tmp_path / "syn.jsonl"
    write_lines(ds, synthetic_records(12))
    out = tmp_path / "m"
    assert run("train-toy", "--dataset", ds, "--out", out, "--steps", "0", "--dim", "8", "--seed", "4") == 0
    params, vocab, cfg = load_checkpoint(out / "checkpoint.json")
    init = ToyEncoderParams.init(len(vocab), 8, seed=4)
    for name in PARAM_NAMES:
        assert np.array_equal(getattr(params, name), getattr(init, name))
    assert cfg["steps"] == 0
    assert (out / "train_log.csv").read_text().splitlines()[0] == "step,L_SC,L_MNTP,L,retrieval_acc"
    assert set(json.loads((out / "summary.json").read_text())) >= {"initial_accuracy", "final_accuracy"}
    assert json.loads((out / "manifest.json").read_text())["seed"] == 4


def test_train_is_deterministic(tmp_path):
    ds = tmp_path / "syn.jsonl"
    write_lines(ds, synthetic_records(12))
    for name in ("a", "b"):
        assert run("train-toy", "--dataset", ds, "--out", tmp_path / name, "--steps", "4",
                   "--batch-size", "4", "--dim", "8", "--lr", "3e-3", "--eval-every", "2") == 0
    for f in ("checkpoint.json", "train_log.csv", "summary.json", "manifest.json"):
        if f == "manifest.json":
            a, b = (json.loads((tmp_path / n / f).read_text()) for n in "ab")
            a["config"].pop("out"), b["config"].pop("out")
            assert a == b
        else:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_against_itself(tmp_path, capsys):
    refs = tmp_path / "refs.jsonl"
    write_lines(refs, [{"id": "1", "text": "Paris, France", "keywords": ["paris"]}, {"id": "2", "text": "forty two"}])
    out = tmp_path / "e.json"
    assert run("eval", "--references", refs, "--predictions", refs, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["rouge_l"] == rep["token_f1"] == rep["edit_similarity"] == rep["keyword_recall"] == 1.0
    assert rep["n"] == 2


def test_eval_plain_lines(tmp_path):
    refs, preds = tmp_path / "r.txt", tmp_path / "p.txt"
    refs.write_text("the cat sat\nblue whale\n")
    preds.write_text("the cat\nthe blue fish\n")
    out = tmp_path / "e.json"
    assert run("eval", "--references", refs, "--predictions", preds, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["per_item"][0]["rouge_l"] == pytest.approx(0.8)
    assert rep["per_item"][1]["token_f1"] == pytest.approx(0.5)


def test_eval_missing_prediction(tmp_path):
    refs, preds = tmp_path / "r.txt", tmp_path / "p.txt"
    refs.write_text("a\nb\n")
    preds.write_text("a\n")
    with pytest.raises(SystemExit) as exc:
        run("eval", "--references", refs, "--predictions", preds)
    assert exc.value.code == 2

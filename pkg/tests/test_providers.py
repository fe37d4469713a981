import json
import math
import threading
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpc.providers import (
    BigramDensity,
    ContextOverflowError,
    DegenerateSpanError,
    EmptyQuestionError,
    HashEncoder,
    ProviderError,
    RateLimitError,
    RemoteEncoder,
    RemoteGenerator,
    ScriptedGenerator,
    TransportError,
    UnigramDensity,
    UnsupportedProviderError,
    answer_distributions,
    cosine,
    embed_document,
    embed_question,
    pool_span,
    prompt_key,
)
from cpc.segmentation import tokenize
from cpc.trainer import ToyEncoder, ToyEncoderParams, Vocab


def test_pool_span_examples():
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(pool_span(Z, 0, 1), [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-12)
    np.testing.assert_allclose(pool_span(Z, 1, 1), [0.0, 1.0])
    same = np.tile([3.0, 4.0], (4, 1))
    np.testing.assert_allclose(pool_span(same, 0, 3), [0.6, 0.8])


def test_pool_span_errors():
    Z = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DegenerateSpanError):
        pool_span(Z, 0, 1)
    with pytest.raises(IndexError):
        pool_span(Z, 1, 2)
    with pytest.raises(IndexError):
        pool_span(Z, 1, 0)


def test_pool_full_document_is_normalized_mean():
    Z = np.random.default_rng(0).normal(size=(7, 5))
    m = Z.mean(axis=0)
    np.testing.assert_allclose(pool_span(Z, 0, 6), m / np.linalg.norm(m))


def test_cosine_examples():
    e = np.array([0.6, 0.8])
    assert cosine(e, e) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([1.0, 0.0], [-1.0, 0.0]) == -1.0
    with pytest.raises(ValueError):
        cosine([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=1, max_value=16))
def test_cosine_symmetric_bounded(seed, dim):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, dim))
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)
    assert c == pytest.approx(float(a @ b), abs=1e-12)


def test_hash_encoder_deterministic_and_shaped():
    enc = HashEncoder(dim=16)
    toks = ["The", "cat", "sat", "."]
    a = embed_document(enc, toks)
    b = embed_document(HashEncoder(dim=16), toks)
    assert a.shape == (4, 16)
    assert np.array_equal(a, b)
    assert embed_document(enc, ["x"]).shape == (1, 16)


def test_hash_encoder_is_context_dependent():
    enc = HashEncoder()
    a = embed_document(enc, ["alpha", "beta", "gamma"])
    b = embed_document(enc, ["alpha", "beta", "delta"])
    assert not np.allclose(a[0], b[0])


def test_context_overflow():
    class Small(HashEncoder):
        max_tokens = 3

    with pytest.raises(ContextOverflowError):
        embed_document(Small(), ["a"] * 4)


def test_embed_question():
    enc = HashEncoder()
    q = embed_question(enc, "What is it?")
    assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(q, embed_question(enc, "What is it?"))
    single = embed_question(enc, "why")
    v = embed_document(enc, ["why"])[0]
    np.testing.assert_allclose(single, v / np.linalg.norm(v))
    with pytest.raises(EmptyQuestionError):
        embed_question(enc, "   ")


def test_embed_question_matches_pool_span_on_toy_encoder():
    vocab = Vocab(["what", "is", "it", "?"])
    enc = ToyEncoder(ToyEncoderParams.init(len(vocab), 8, seed=3), vocab)
    toks = [t.text for t in tokenize("What is it?")]
    Z = enc.embed_document(toks)
    np.testing.assert_allclose(embed_question(enc, "What is it?"), pool_span(Z, 0, len(toks) - 1), atol=1e-12)


def test_toy_encoder_zero_params_gives_equal_vectors():
    vocab = Vocab(["a", "b", "c"])
    enc = ToyEncoder(ToyEncoderParams.zeros(len(vocab), 4), vocab)
    Z = enc.embed_document(["a", "b", "c", "zzz"])
    assert np.all(Z == Z[0])


# ---------------------------------------------------------------------------
# generators


def test_scripted_generator():
    gen = ScriptedGenerator.from_prompts({"hello": "world"})
    assert gen.generate("hello") == "world"
    assert prompt_key("hello") in gen.responses
    with pytest.raises(ProviderError):
        gen.generate("other")
    assert ScriptedGenerator({}, default="d").generate("x") == "d"


def test_scripted_generator_from_file(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"responses": {prompt_key("p"): "r"}}))
    assert ScriptedGenerator.from_file(path).generate("p") == "r"


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])).decode("utf-8"))
        type(self).seen.append((dict(self.headers), body))
        status, payload = type(self).script.pop(0) if type(self).script else (200, None)
        if payload is None:
            if "tokens" in body:
                payload = {"vectors": [[float(len(t)), 1.0] for t in body["tokens"]]}
            elif "text" in body:
                payload = {"vectors": [[1.0, 0.0], [0.0, 1.0]]}
            else:
                payload = {"text": "echo: " + body["prompt"][:10]}
        raw = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.script = []
    _Handler.seen = []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/", _Handler
    srv.shutdown()


def test_remote_encoder_wire_format(server, monkeypatch):
    url, handler = server
    monkeypatch.setenv("CPC_EMBED_URL", url)
    monkeypatch.setenv("CPC_API_KEY", "secret")
    enc = RemoteEncoder(backoff=0.0)
    Z = embed_document(enc, ["ab", "cde"])
    np.testing.assert_allclose(Z, [[2.0, 1.0], [3.0, 1.0]])
    headers, body = handler.seen[-1]
    assert body == {"tokens": ["ab", "cde"]}
    assert headers["Authorization"] == "Bearer secret"
    np.testing.assert_allclose(enc.embed_text("anything"), [1 / math.sqrt(2), 1 / math.sqrt(2)])
    assert handler.seen[-1][1] == {"text": "anything"}


def test_flag_overrides_env(server, monkeypatch):
    url, handler = server
    monkeypatch.setenv("CPC_EMBED_URL", "http://127.0.0.1:9/unused")
    enc = RemoteEncoder(url=url, api_key="flag")
    embed_document(enc, ["x"])
    assert handler.seen[-1][0]["Authorization"] == "Bearer flag"


def test_remote_retries_then_rate_limit(server):
    url, handler = server
    handler.script = [(429, {}), (200, {"text": "ok"})]
    gen = RemoteGenerator(url=url, backoff=0.0, retries=2)
    assert gen.generate("prompt") == "ok"
    assert handler.seen[-1][1] == {"prompt": "prompt", "max_tokens": 512}
    handler.script = [(429, {})] * 3
    with pytest.raises(RateLimitError):
        RemoteGenerator(url=url, backoff=0.0, retries=2).generate("p")


def test_remote_transport_errors(server):
    url, handler = server
    handler.script = [(400, {"error": "bad"})]
    with pytest.raises(TransportError):
        RemoteGenerator(url=url, backoff=0.0).generate("p")
    with pytest.raises(TransportError):
        RemoteGenerator(url="http://127.0.0.1:9/", backoff=0.0, retries=0, timeout=0.5).generate("p")


def test_remote_requires_url(monkeypatch):
    monkeypatch.delenv("CPC_EMBED_URL", raising=False)
    with pytest.raises(ValueError):
        RemoteEncoder()


def test_remote_concurrent_requests(server):
    url, handler = server
    enc = RemoteEncoder(url=url, max_parallel=2)
    out = [None] * 8

    def work(k):
        out[k] = embed_document(enc, ["t" * (k + 1)])

    threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [o[0, 0] for o in out] == [float(k + 1) for k in range(8)]


# ---------------------------------------------------------------------------
# densities


def test_distribution_shapes_and_normalization():
    dens = BigramDensity.from_corpus(["a b c d e"])
    P = answer_distributions(dens, "a b c", "d", "c d e")
    assert P.shape == (3, dens.vocab_size)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert (P >= 0).all()


def test_unigram_position_independent():
    dens = UnigramDensity.from_corpus(["x y z y"])
    P = answer_distributions(dens, "x y y", "z", "y z x")
    assert np.array_equal(P[0], P[1]) and np.array_equal(P[1], P[2])


def test_bigram_matches_hand_counts():
    # vocabulary {a, b, c, d, e} + <unk>; conditioning text "a b a c a b" then question "d"
    dens = BigramDensity(["a", "b", "c", "d", "e"], alpha=0.5)
    P = answer_distributions(dens, "a b a c a b", "d", "a b")
    idx = {w: dens.index[w] for w in ["<unk>", "a", "b", "c", "d", "e"]}
    # position 0: previous token is "d" (end of question); "d" is never followed -> uniform
    np.testing.assert_allclose(P[0], np.full(6, 1 / 6))
    # position 1: previous token "a"; followers of "a": b, c, b -> b:2, c:1, total 3
    denom = Fraction(3) + Fraction(1, 2) * 6
    expected = {w: Fraction(1, 2) / denom for w in idx}
    expected["b"] = (2 + Fraction(1, 2)) / denom
    expected["c"] = (1 + Fraction(1, 2)) / denom
    for w, k in idx.items():
        assert P[1][k] == pytest.approx(float(expected[w]), abs=1e-15)


def test_unsupported_density_provider():
    with pytest.raises(UnsupportedProviderError):
        answer_distributions(ScriptedGenerator({}), "c", "q", "a")


def test_empty_answer_rejected():
    with pytest.raises(ValueError):
        BigramDensity(["a"]).answer_distributions("a", "q", "  ")

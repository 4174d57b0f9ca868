import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from deliberag.backend import (
    BASE_URL_ENV,
    BackendConfig,
    GenerationRequest,
    MockBackend,
    OllamaBackend,
    fnv1a_64,
    hash_embed,
    make_backend,
)
from deliberag.errors import (
    BackendProtocolError,
    BackendUnreachable,
    ConfigError,
    DimensionMismatch,
    EmptyCompletion,
    EmptyInput,
    ScriptExhausted,
)
from deliberag.index import cosine_similarity


def oracle_fnv1a_64(data: bytes) -> int:
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


class TestFnv:
    # published FNV-1a 64-bit test vectors
    @pytest.mark.parametrize("data, expected", [
        (b"", 0xCBF29CE484222325),
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ])
    def test_known_vectors(self, data, expected):
        assert fnv1a_64(data) == expected == oracle_fnv1a_64(data)


class TestHashEmbed:
    def test_unit_norm(self):
        v = hash_embed("Waste storage site near the river", 64)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
        assert (v >= 0).all()

    def test_single_token(self):
        v = hash_embed("A a A", 64)
        assert np.count_nonzero(v) == 1
        assert v[oracle_fnv1a_64(b"a") % 64] == 1.0

    def test_order_invariance(self):
        assert np.array_equal(hash_embed("storage site"), hash_embed("site storage"))

    def test_repeated_token_same_direction(self):
        # "radiation radiation" -> count 2 in one bucket; normalized both become the same unit vector
        assert cosine_similarity(hash_embed("radiation radiation"), hash_embed("radiation")) == 1.0

    def test_tokenizer_splits_on_non_alphanumerics(self):
        assert np.array_equal(hash_embed("doe_g-414.1"), hash_embed("DOE G 414 1"))

    def test_bucket_counts_against_oracle(self):
        text = "rail transport of heavy casks, rail!"
        counts = np.zeros(32)
        for tok in ["rail", "transport", "of", "heavy", "casks", "rail"]:
            counts[oracle_fnv1a_64(tok.encode()) % 32] += 1
        assert np.allclose(hash_embed(text, 32), counts / np.sqrt((counts ** 2).sum()), atol=1e-12)

    @pytest.mark.parametrize("text", ["", "  ", "!!! ---"])
    def test_no_tokens(self, text):
        with pytest.raises(EmptyInput):
            hash_embed(text, 64)


class TestMockBackend:
    def test_embed_deterministic(self):
        b = MockBackend()
        assert np.array_equal(b.embed_text("waste storage"), b.embed_text("waste storage"))
        assert b.embed_text("waste storage").shape == (64,)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            MockBackend().embed_text("")

    def test_batch(self):
        b = MockBackend()
        assert b.embed_batch([]) == []
        x, y = b.embed_batch(["a b", "a b"])
        assert np.array_equal(x, y)
        texts = ["one", "two three", "four"]
        assert all(np.array_equal(u, v) for u, v in zip(b.embed_batch(texts), [b.embed_text(t) for t in texts]))

    def test_batch_error_names_index(self):
        with pytest.raises(EmptyInput, match="batch item 1"):
            MockBackend().embed_batch(["ok", ""])

    def test_replay(self):
        b = MockBackend(script={"RCA": ["R1: site is stable. DECISION: AGREE"]})
        req = GenerationRequest("sys", "user", role_id="RCA")
        assert b.generate(req).text == "R1: site is stable. DECISION: AGREE"
        with pytest.raises(ScriptExhausted):
            b.generate(req)

    def test_empty_script(self):
        with pytest.raises(ScriptExhausted):
            MockBackend(script={}).generate(GenerationRequest("s", "u", role_id="SEA"))

    def test_queues_per_role_and_purpose(self):
        b = MockBackend(script={"RCA": ["r1", "r2"], "SEA": ["s1"], "RCA:rewrite": ["q2"]})
        gen = lambda role, purpose="respond": b.generate(GenerationRequest("s", "u", role_id=role, purpose=purpose)).text
        assert gen("SEA") == "s1"
        assert gen("RCA", "rewrite") == "q2"
        assert gen("RCA") == "r1"
        assert gen("RCA") == "r2"

    def test_empty_scripted_completion(self):
        b = MockBackend(script={"RCA": ["   "]})
        with pytest.raises(EmptyCompletion):
            b.generate(GenerationRequest("s", "u", role_id="RCA"))

    def test_fifo_under_threads(self):
        b = MockBackend(script={"RCA": [str(i) for i in range(200)]})
        out = []
        lock = threading.Lock()

        def worker():
            for _ in range(50):
                t = b.generate(GenerationRequest("s", "u", role_id="RCA")).text
                with lock:
                    out.append(int(t))

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(out) == list(range(200))


class StubServer:
    """Minimal Ollama-compatible server recording every request body."""

    def __init__(self, embed=None, generate=None):
        self.requests = []
        self.embed = embed or (lambda body: (200, {"embedding": hash_embed(body["prompt"], 16).tolist()}))
        self.generate = generate or (lambda body: (200, {"response": "Grounded answer.\nDECISION: AGREE"}))
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((self.path, body))
                route = {"/api/embeddings": stub.embed, "/api/generate": stub.generate}.get(self.path)
                status, payload = route(body) if route else (404, {"error": "not found"})
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestOllamaWire:
    def test_embeddings_body(self):
        with StubServer() as srv:
            b = OllamaBackend(srv.url, embed_model="mxbai-embed-large")
            v = b.embed_text("waste storage")
        assert srv.requests == [("/api/embeddings", {"model": "mxbai-embed-large", "prompt": "waste storage"})]
        assert np.array_equal(v, hash_embed("waste storage", 16))
        assert b.dim == 16

    def test_generate_body(self):
        with StubServer() as srv:
            b = OllamaBackend(srv.url, gen_model="llama3.2", temperature=0.0)
            resp = b.generate(GenerationRequest("system text", "user text"))
        assert resp.text == "Grounded answer.\nDECISION: AGREE"
        assert srv.requests == [("/api/generate", {
            "model": "llama3.2", "system": "system text", "prompt": "user text",
            "stream": False, "options": {"temperature": 0.0},
        })]

    def test_request_temperature_overrides(self):
        with StubServer() as srv:
            OllamaBackend(srv.url).generate(GenerationRequest("s", "u", temperature=0.7))
        assert srv.requests[0][1]["options"] == {"temperature": 0.7}

    def test_non_200(self):
        with StubServer(generate=lambda body: (500, {"error": "model not loaded"})) as srv:
            with pytest.raises(BackendProtocolError, match="500.*model not loaded"):
                OllamaBackend(srv.url).generate(GenerationRequest("s", "u"))

    @pytest.mark.parametrize("payload", [{"nope": 1}, {"embedding": []}, {"embedding": ["x"]}, b"not json"])
    def test_malformed_embedding(self, payload):
        with StubServer(embed=lambda body: (200, payload)) as srv:
            with pytest.raises(BackendProtocolError):
                OllamaBackend(srv.url).embed_text("hi")

    def test_missing_response_field(self):
        with StubServer(generate=lambda body: (200, {"done": True})) as srv:
            with pytest.raises(BackendProtocolError):
                OllamaBackend(srv.url).generate(GenerationRequest("s", "u"))

    def test_empty_completion(self):
        with StubServer(generate=lambda body: (200, {"response": "  "})) as srv:
            with pytest.raises(EmptyCompletion):
                OllamaBackend(srv.url).generate(GenerationRequest("s", "u"))

    def test_dimension_mismatch(self):
        dims = iter([8, 8, 9])
        with StubServer(embed=lambda body: (200, {"embedding": [1.0] * next(dims)})) as srv:
            b = OllamaBackend(srv.url)
            b.embed_text("a")
            b.embed_text("b")
            with pytest.raises(DimensionMismatch):
                b.embed_text("c")

    def test_unreachable_names_url_and_timeout(self):
        url = f"http://127.0.0.1:{free_port()}"
        b = OllamaBackend(url, timeout_ms=500, retry_base_s=0.01)
        with pytest.raises(BackendUnreachable) as err:
            b.embed_text("hi")
        assert url in str(err.value) and "500 ms" in str(err.value) and "2 attempts" in str(err.value)


class TestMakeBackend:
    def test_mock(self, fixtures):
        b = make_backend(BackendConfig(mode="mock", mock_dim=32, mock_script=str(fixtures / "script.json")))
        assert isinstance(b, MockBackend) and b.dim == 32
        assert b.remaining("DRA") == 3

    def test_live_needs_url(self, monkeypatch):
        monkeypatch.delenv(BASE_URL_ENV, raising=False)
        with pytest.raises(ConfigError):
            make_backend(BackendConfig(mode="live"))

    def test_env_overrides_base_url(self, monkeypatch):
        monkeypatch.setenv(BASE_URL_ENV, "http://env-host:1234")
        b = make_backend(BackendConfig(mode="live", base_url="http://config-host:1"))
        assert b.base_url == "http://env-host:1234"

    def test_defaults(self):
        cfg = BackendConfig()
        assert (cfg.embed_model, cfg.gen_model, cfg.temperature, cfg.timeout_ms, cfg.mock_dim) == (
            "mxbai-embed-large", "llama3.2", 0.0, 120000, 64)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            BackendConfig(temperature=-1)


def test_two_round_discussion_over_http(fixture_corpus):
    from deliberag.discussion import DiscussionConfig, run_discussion, transcript_from_dict, transcript_to_dict

    with StubServer() as srv:
        backend = make_backend(BackendConfig(mode="live", base_url=srv.url))
        t = run_discussion(DiscussionConfig(task="Check a proposed storage site near Winslow.", rounds=2),
                           fixture_corpus, backend)
    assert t.completed_rounds == 2
    assert transcript_from_dict(transcript_to_dict(t)) == t
    paths = [p for p, _ in srv.requests]
    assert paths.count("/api/generate") == 6  # 4 responses + 2 round-2 rewrites

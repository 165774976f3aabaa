import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eligo import errors
from eligo.corpus import Verdict
from eligo.gateway import (
    BackendConfig,
    ChatRequest,
    Gateway,
    Message,
    MOCK_FALLBACK,
    mock_resolve,
    parse_answer,
    user_request,
)

from conftest import make_mock_gateway


class TestParseAnswer:
    def test_quoted_yes_with_rationale(self):
        text = ('"Yes". The patient was diagnosed with liver cancer, '
                "which is a malignant liver tumor.")
        answer = parse_answer(text, "tag")
        assert answer.value is Verdict.YES
        assert answer.rationale.startswith("The patient was diagnosed")
        assert answer.parse_fallback is False
        assert answer.provenance == "tag"

    def test_information_not_provided_maps_to_unknown(self):
        text = ('"Information not provided". There is no indication that the '
                "tumor metastasized from another site.")
        answer = parse_answer(text)
        assert answer.value is Verdict.UNKNOWN
        assert answer.parse_fallback is False

    def test_unable_to_determine(self):
        answer = parse_answer('"Unable to determine". The note is silent.')
        assert answer.value is Verdict.UNKNOWN

    def test_refusal_degrades_to_unknown_flagged(self):
        answer = parse_answer("I cannot comply with this.")
        assert answer.value is Verdict.UNKNOWN
        assert answer.parse_fallback is True

    def test_unquoted_verdict_recovered_via_fallback(self):
        answer = parse_answer("Yes, the resection history makes this clear.")
        assert answer.value is Verdict.YES
        assert answer.parse_fallback is True

    def test_ambiguous_first_sentence_stays_unknown(self):
        answer = parse_answer("Yes and no, the note is contradictory.")
        assert answer.value is Verdict.UNKNOWN
        assert answer.parse_fallback is True

    def test_unmapped_quoted_token_falls_back(self):
        answer = parse_answer('"Maybe". Hard to say.')
        assert answer.value is Verdict.UNKNOWN
        assert answer.parse_fallback is True

    def test_evidence_block_extracted_and_removed(self):
        text = ('"No". The type is trabecular.\n'
                'EVIDENCE:\n'
                '"hepatocellular carcinoma (trabecular type)"\n'
                '"no mixed features"\n'
                'END EVIDENCE')
        answer = parse_answer(text)
        assert answer.evidence == (
            "hepatocellular carcinoma (trabecular type)",
            "no mixed features",
        )
        assert "EVIDENCE" not in answer.rationale

    def test_dangling_evidence_marker_kept_in_rationale(self):
        answer = parse_answer('"Yes". Reasoning.\nEVIDENCE:\n"quote without end"')
        assert answer.evidence == ()
        assert "quote without end" in answer.rationale

    def test_empty_evidence_lines_dropped(self):
        text = '"Yes". r\nEVIDENCE:\n\n"  "\n"real quote"\nEND EVIDENCE'
        assert parse_answer(text).evidence == ("real quote",)

    def test_case_insensitive_verdicts(self):
        assert parse_answer('"YES". x').value is Verdict.YES
        assert parse_answer('"unknown". x').value is Verdict.UNKNOWN

    @given(st.text(max_size=400))
    @settings(max_examples=200, deadline=None)
    def test_total_and_idempotent_on_rationale(self, text):
        first = parse_answer(text)
        assert first.value in (Verdict.YES, Verdict.NO, Verdict.UNKNOWN)
        again = parse_answer(first.rationale)
        assert again.rationale == first.rationale


class TestChatRequest:
    def test_requires_messages(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=()).validate()

    def test_rejects_empty_content(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(Message("user", ""),)).validate()

    def test_rejects_unknown_speaker(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(Message("narrator", "x"),)).validate()

    def test_rejects_negative_temperature(self):
        with pytest.raises(ValueError):
            user_request("x", temperature=-1).validate()

    def test_default_temperature_zero(self):
        assert user_request("x").temperature == 0


class TestBackendConfig:
    def test_http_requires_base_url(self):
        with pytest.raises(ValueError):
            BackendConfig(kind="http").validate()

    def test_max_inflight_bound(self):
        with pytest.raises(ValueError):
            BackendConfig(kind="mock", max_inflight=0).validate()

    def test_timeout_positive(self):
        with pytest.raises(ValueError):
            BackendConfig(kind="mock", timeout_ms=0).validate()


class TestMockBackend:
    def test_fixture_passthrough(self):
        fixtures = {"n1|Q1|roleCRC": "canned reply"}
        req = user_request("prompt", tag="n1|Q1|roleCRC")
        assert mock_resolve(req, fixtures) == "canned reply"

    def test_miss_is_deterministic_fallback(self):
        req = user_request("prompt", tag="absent")
        assert mock_resolve(req, {}) == MOCK_FALLBACK
        assert mock_resolve(req, {}) == MOCK_FALLBACK

    def test_equal_streams_for_equal_inputs(self):
        fixtures = {"a": "one", "b": "two"}
        tags = ["a", "b", "missing", "a"]
        def run():
            gateway = make_mock_gateway(fixtures)
            return [gateway.complete(user_request("x", tag=tag)) for tag in tags]
        assert run() == run()

    def test_seeded_fixture_preferred(self):
        fixtures = {"a": "plain", "s1|a": "seeded"}
        gateway = make_mock_gateway(fixtures, seed="s1")
        assert gateway.complete(user_request("x", tag="a")) == "seeded"
        gateway = make_mock_gateway(fixtures)
        assert gateway.complete(user_request("x", tag="a")) == "plain"

    def test_peak_inflight_bounded(self):
        gateway = make_mock_gateway({}, latency_s=0.002, max_inflight=3)
        with ThreadPoolExecutor(max_workers=40) as pool:
            list(pool.map(
                lambda i: gateway.complete(user_request("x", tag=str(i))), range(120)
            ))
        assert gateway.transport.calls == 120
        assert 1 <= gateway.transport.peak_inflight <= 3

    def test_peak_inflight_one_when_serialized(self):
        gateway = make_mock_gateway({}, latency_s=0.001, max_inflight=1)
        with ThreadPoolExecutor(max_workers=16) as pool:
            list(pool.map(
                lambda i: gateway.complete(user_request("x", tag=str(i))), range(40)
            ))
        assert gateway.transport.peak_inflight == 1


# -- scripted HTTP backend ------------------------------------------------------

class _ScriptedHandler(BaseHTTPRequestHandler):
    script = []          # list of (status, payload dict or raw str)
    calls = []
    delay_s = 0.0
    lock = threading.Lock()

    def do_POST(self):
        with self.lock:
            index = len(self.calls)
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length)) if length else {}
            self.calls.append({"path": self.path, "body": body,
                               "auth": self.headers.get("Authorization")})
        if self.delay_s:
            time.sleep(self.delay_s)
        status, payload = self.script[min(index, len(self.script) - 1)]
        data = (json.dumps(payload) if isinstance(payload, dict) else payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def _http_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join()


@pytest.fixture
def http_backend(_http_server):
    _ScriptedHandler.script = []
    _ScriptedHandler.calls = []
    _ScriptedHandler.delay_s = 0.0
    return _http_server, _ScriptedHandler


def _ok_payload(content="fine"):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def _http_gateway(base_url, retry_limit=3):
    cfg = BackendConfig(kind="http", base_url=base_url, model_name="test-model",
                        timeout_ms=5000, retry_limit=retry_limit, backoff_s=0.0)
    return Gateway(cfg)


class TestHttpBackend:
    def test_success_returns_content(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(200, _ok_payload("hello"))]
        gateway = _http_gateway(base_url)
        assert gateway.complete(user_request("hi", tag="t")) == "hello"
        sent = handler.calls[0]
        assert sent["path"] == "/v1/chat/completions"
        assert sent["body"]["model"] == "test-model"
        assert sent["body"]["messages"] == [{"role": "user", "content": "hi"}]

    def test_bearer_token_passthrough(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(200, _ok_payload())]
        cfg = BackendConfig(kind="http", base_url=base_url, model_name="m",
                            api_key="sekrit", backoff_s=0.0)
        Gateway(cfg).complete(user_request("hi"))
        assert handler.calls[0]["auth"] == "Bearer sekrit"

    def test_retries_500_then_succeeds(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(500, {"error": "boom"}), (500, {"error": "boom"}),
                          (200, _ok_payload("ok"))]
        gateway = _http_gateway(base_url, retry_limit=3)
        assert gateway.complete(user_request("hi")) == "ok"
        assert len(handler.calls) == 3  # success after 2 retries

    def test_exhausted_retries(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(503, {"error": "down"})]
        gateway = _http_gateway(base_url, retry_limit=2)
        with pytest.raises(errors.ExhaustedRetriesError) as excinfo:
            gateway.complete(user_request("hi"))
        assert len(handler.calls) == 3  # 1 attempt + 2 retries
        assert isinstance(excinfo.value.last_error, errors.BackendError)

    def test_client_error_not_retried(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(404, {"error": "nope"})]
        gateway = _http_gateway(base_url, retry_limit=3)
        with pytest.raises(errors.BackendError) as excinfo:
            gateway.complete(user_request("hi"))
        assert len(handler.calls) == 1
        assert excinfo.value.status == 404
        assert "nope" in str(excinfo.value)

    def test_malformed_payload_is_backend_error(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(200, {"unexpected": True})]
        with pytest.raises(errors.BackendError):
            _http_gateway(base_url, retry_limit=0).complete(user_request("hi"))

    def test_slow_backend_times_out(self, http_backend):
        base_url, handler = http_backend
        handler.script = [(200, _ok_payload())]
        handler.delay_s = 0.5
        cfg = BackendConfig(kind="http", base_url=base_url, model_name="m",
                            timeout_ms=100, retry_limit=0, backoff_s=0.0)
        with pytest.raises(errors.ExhaustedRetriesError) as excinfo:
            Gateway(cfg).complete(user_request("hi"))
        assert isinstance(excinfo.value.last_error, errors.TimeoutError)

    def test_unreachable_host_raises_transport_error(self):
        cfg = BackendConfig(kind="http", base_url="http://127.0.0.1:9",
                            model_name="m", retry_limit=0, backoff_s=0.0,
                            timeout_ms=500)
        with pytest.raises(errors.ExhaustedRetriesError) as excinfo:
            Gateway(cfg).complete(user_request("hi"))
        assert isinstance(excinfo.value.last_error, errors.TransportError)


def test_gateway_ask_parses(mock_gateway_factory):
    gateway = mock_gateway_factory({"t": '"No". Reasoning here.'})
    answer = gateway.ask(user_request("x", tag="t"))
    assert answer.value is Verdict.NO
    assert answer.provenance == "t"

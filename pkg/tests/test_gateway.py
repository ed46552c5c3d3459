import json
import math
import threading
import time

import httpx
import pytest

from conftest import make_gateway
from mdiag.errors import BackendError, EndpointStatusError, PreconditionError, ScoringUnsupported, TransportError
from mdiag.gateway import (
    BackendConfig,
    DecodeMode,
    Gateway,
    GenerationRequest,
    OpenAICompatibleBackend,
    ScriptedBackend,
    TokenLogProbs,
)
from mdiag.utils import sha256_text


def chat_response(text, finish_reason="stop", completion_tokens=3):
    return {
        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish_reason}],
        "usage": {"completion_tokens": completion_tokens},
    }


def openai_gateway(handler, retry_limit=2, cache_dir=None, max_in_flight=4):
    config = BackendConfig(
        base_url="http://llm.test/v1",
        api_key="secret-key",
        retry_limit=retry_limit,
        cache_dir=cache_dir,
        max_in_flight=max_in_flight,
    )
    backend = OpenAICompatibleBackend(config, transport=httpx.MockTransport(handler))
    return Gateway(backend, config, sleep=lambda _: None)


def test_chat_completion_payload_and_result():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("Authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=chat_response("Restart the agent."))

    with openai_gateway(handler) as gateway:
        result = gateway.generate(GenerationRequest("model-a", "How?", temperature=0.7, seed=4))

    assert result.text == "Restart the agent."
    assert result.finish_reason == "stop"
    assert result.token_count == 3
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer secret-key"
    assert seen["body"]["seed"] == 4
    assert seen["body"]["temperature"] == 0.7
    assert seen["body"]["messages"] == [{"role": "user", "content": "How?"}]


def test_greedy_decoding_sends_zero_temperature():
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(200, json=chat_response("Yes"))

    with openai_gateway(handler) as gateway:
        gateway.generate(GenerationRequest("judge", "Q", temperature=0.9, decode_mode=DecodeMode.GREEDY))
    assert bodies[0]["temperature"] == 0.0


def test_truncation_reports_length_and_budget():
    def handler(request):
        return httpx.Response(200, json=chat_response("partial", finish_reason="length"))

    with openai_gateway(handler) as gateway:
        result = gateway.generate(GenerationRequest("m", "Q", max_tokens=32))
    assert result.finish_reason == "length"
    assert result.token_count == 32


def test_retries_transient_status_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json=chat_response("ok"))

    with openai_gateway(handler, retry_limit=2) as gateway:
        assert gateway.generate(GenerationRequest("m", "Q")).text == "ok"
        assert gateway.calls == 3


def test_retry_budget_exhausted_raises_transport_error():
    def handler(request):
        raise httpx.ConnectError("connection refused")

    with openai_gateway(handler, retry_limit=2) as gateway:
        with pytest.raises(TransportError):
            gateway.generate(GenerationRequest("m", "Q"))
        assert gateway.calls == 3


def test_non_retriable_status_fails_immediately():
    def handler(request):
        return httpx.Response(401, text="bad key")

    with openai_gateway(handler, retry_limit=3) as gateway:
        with pytest.raises(EndpointStatusError) as excinfo:
            gateway.generate(GenerationRequest("m", "Q"))
        assert excinfo.value.status == 401
        assert "bad key" in excinfo.value.body
        assert gateway.calls == 1


def test_retry_after_header_is_honoured():
    delays = []
    responses = iter(
        [httpx.Response(429, headers={"Retry-After": "7"}, text="slow down"), httpx.Response(200, json=chat_response("ok"))]
    )
    config = BackendConfig(base_url="http://llm.test/v1", retry_limit=1)
    backend = OpenAICompatibleBackend(config, transport=httpx.MockTransport(lambda r: next(responses)))
    with Gateway(backend, config, sleep=delays.append) as gateway:
        gateway.generate(GenerationRequest("m", "Q"))
    assert delays and delays[0] >= 7


def test_cache_hit_skips_the_backend(tmp_path):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(200, json=chat_response("cached answer"))

    request = GenerationRequest("m", "Q", seed=1)
    with openai_gateway(handler, cache_dir=str(tmp_path / "cache")) as gateway:
        first = gateway.generate(request)
        second = gateway.generate(request)
        other_seed = gateway.generate(GenerationRequest("m", "Q", seed=2))

    assert first.text == second.text == other_seed.text == "cached answer"
    assert not first.cached
    assert second.cached
    assert len(calls) == 2


def test_greedy_cache_key_ignores_requested_temperature():
    a = GenerationRequest("m", "Q", temperature=0.2, decode_mode=DecodeMode.GREEDY)
    b = GenerationRequest("m", "Q", temperature=0.9, decode_mode=DecodeMode.GREEDY)
    assert a.cache_key() == b.cache_key()
    assert GenerationRequest("m", "Q", temperature=0.2).cache_key() != GenerationRequest("m", "Q", temperature=0.9).cache_key()


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest("m", "Q", temperature=-0.1)
    with pytest.raises(ValueError):
        GenerationRequest("m", "Q", max_tokens=0)


def test_score_drops_generated_tail():
    def handler(request):
        body = json.loads(request.content)
        assert body["echo"] is True
        assert body["logprobs"] == 1
        return httpx.Response(
            200,
            json={
                "choices": [
                    {
                        "logprobs": {
                            "tokens": ["Spool", " limit", " reached", "."],
                            "token_logprobs": [None, -1.0, -3.0, -0.5],
                            "text_offset": [0, 5, 11, 19],
                        }
                    }
                ]
            },
        )

    with openai_gateway(handler) as gateway:
        scored = gateway.score_tokens("m", "Spool limit reached")
    assert scored.tokens == ("Spool", " limit", " reached")
    assert scored.logprobs == (None, -1.0, -3.0)
    assert scored.usable == [-1.0, -3.0]
    assert scored.omitted == 1


def test_score_unsupported_route():
    def handler(request):
        return httpx.Response(404, text="no completions route")

    with openai_gateway(handler) as gateway:
        with pytest.raises(ScoringUnsupported):
            gateway.score_tokens("m", "text")


def test_score_without_logprobs_is_unsupported():
    def handler(request):
        return httpx.Response(200, json={"choices": [{"text": "x", "logprobs": None}]})

    with openai_gateway(handler) as gateway:
        with pytest.raises(ScoringUnsupported):
            gateway.score_tokens("m", "text")


def test_empty_text_cannot_be_scored(scripted_gateway):
    gateway = scripted_gateway(scorer=lambda m, t: TokenLogProbs(("a",), (0.0,)))
    with pytest.raises(PreconditionError):
        gateway.score_tokens("m", "")


def test_positive_logprob_rejected():
    with pytest.raises(ValueError):
        TokenLogProbs(tokens=("a",), logprobs=(0.5,))


def test_scripted_table_lookup(tmp_path):
    path = tmp_path / "table.jsonl"
    path.write_text(
        json.dumps({"prompt_digest": sha256_text("Q"), "seed": 3, "text": "from the table"}) + "\n",
        encoding="utf-8",
    )
    gateway = make_gateway(ScriptedBackend.from_table_file(str(path), default_text="fallback"))
    assert gateway.generate(GenerationRequest("m", "Q", seed=3)).text == "from the table"
    assert gateway.generate(GenerationRequest("m", "Q", seed=4)).text == "fallback"


def test_scripted_backend_without_response_fails(scripted_gateway):
    gateway = scripted_gateway()
    with pytest.raises(BackendError):
        gateway.generate(GenerationRequest("m", "Q"))


def test_constant_logprob_backend():
    gateway = make_gateway(ScriptedBackend.with_constant_logprob(math.log(0.5), omit_first=True))
    scored = gateway.score_tokens("m", "one two three")
    assert scored.logprobs == (None, math.log(0.5), math.log(0.5))


def test_in_flight_bound_is_respected():
    backend = ScriptedBackend(default_text="ok", delay=0.02)
    gateway = make_gateway(backend, max_in_flight=3)
    threads = [
        threading.Thread(target=gateway.generate, args=(GenerationRequest("m", f"Q{i}"),)) for i in range(12)
    ]
    started = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.calls == 12
    assert backend.peak_in_flight <= 3
    assert time.monotonic() - started < 5


def test_concurrent_identical_requests_share_the_cache(tmp_path):
    cache_dir = tmp_path / "cache"
    gateway = make_gateway(ScriptedBackend(default_text="Yes", delay=0.002), max_in_flight=16, cache_dir=str(cache_dir))
    request = GenerationRequest("judge", "Is the condition met?", decode_mode=DecodeMode.GREEDY)
    errors, texts = [], []

    for _ in range(10):
        barrier = threading.Barrier(16)

        def worker():
            barrier.wait()
            try:
                texts.append(gateway.generate(request).text)
            except Exception as e:
                errors.append(e)

        threads = [threading.Thread(target=worker) for _ in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    assert errors == []
    assert texts == ["Yes"] * 160
    assert not [p for p in cache_dir.rglob("*") if p.name.endswith(".tmp")]

import json
import random
import threading

import httpx
import pytest

from absa_forge.gateway import (
    ChatResponse,
    DecodeError,
    Gateway,
    OpenAIBackend,
    PermanentError,
    PromptRequest,
    ResponseCache,
    TransientError,
    TransportError,
    backoff_delay,
    cache_key,
)
from absa_forge.mock import MockBackend, MockScript
from absa_forge.prompts import build_ada_prompt


def _req(text="hello", **kw):
    return PromptRequest.user(text, **kw)


class CountingBackend:
    backend_id = "count"

    def __init__(self, fail=()):
        self.fail = list(fail)
        self.calls = 0

    def send(self, req, ordinal=0):
        self.calls += 1
        if self.fail:
            status = self.fail.pop(0)
            if status == 429 or status >= 500:
                raise TransientError(f"HTTP {status}", status)
            raise PermanentError(f"HTTP {status}", status)
        return f"reply to {req.last_user_content} #{ordinal}"


def test_request_validation():
    with pytest.raises(ValueError):
        PromptRequest(messages=())
    with pytest.raises(ValueError):
        _req(temperature=float("nan"))
    with pytest.raises(ValueError):
        _req(temperature=2.5)
    with pytest.raises(ValueError):
        PromptRequest(messages=(("assistant", "x"),))


def test_cache_key_stable_and_ordinal_sensitive():
    r = _req()
    assert cache_key("b", r, 0) == cache_key("b", _req(), 0)
    assert cache_key("b", r, 0) != cache_key("b", r, 1)
    assert cache_key("b", r) != cache_key("c", r)
    assert cache_key("b", r) != cache_key("b", _req(temperature=1.0))
    assert cache_key("b", r) != cache_key("b", _req(model="other"))


def test_second_call_hits_cache():
    be = CountingBackend()
    gw = Gateway(be, sleep=lambda s: None)
    first = gw.complete(_req())
    second = gw.complete(_req())
    assert not first.from_cache and second.from_cache
    assert first.text == second.text
    assert be.calls == 1


def test_retry_then_succeed_counts_attempts():
    be = MockBackend(MockScript(fail_with=[429, 429]))
    sleeps = []
    gw = Gateway(be, sleep=sleeps.append)
    resp = gw.complete(_req(build_ada_prompt("The food was good.", "food"), max_retries=3))
    assert resp.attempt_count == 3
    assert len(sleeps) == 2


def test_zero_retries_raises_transport_error():
    gw = Gateway(CountingBackend(fail=[503]), sleep=lambda s: None)
    with pytest.raises(TransportError) as err:
        gw.complete(_req(max_retries=0))
    assert err.value.status == 503


def test_exhausted_retries_carry_last_status():
    be = CountingBackend(fail=[500, 502, 429])
    gw = Gateway(be, sleep=lambda s: None)
    with pytest.raises(TransportError) as err:
        gw.complete(_req(max_retries=2))
    assert err.value.status == 429 and be.calls == 3


def test_non_retryable_fails_immediately():
    be = CountingBackend(fail=[400])
    gw = Gateway(be, sleep=lambda s: None)
    with pytest.raises(PermanentError):
        gw.complete(_req(max_retries=5))
    assert be.calls == 1


def test_backoff_schedule():
    rng = random.Random(0)
    for attempt, base in [(1, 1.0), (2, 2.0), (3, 4.0), (5, 16.0)]:
        d = backoff_delay(attempt, rng)
        assert base * 0.8 <= d <= base * 1.2
    assert backoff_delay(10, rng) <= 30.0


def test_cache_persists_across_instances(tmp_path):
    path = tmp_path / "cache.jsonl"
    be = CountingBackend()
    Gateway(be, ResponseCache(path)).complete(_req())
    be2 = CountingBackend()
    resp = Gateway(be2, ResponseCache(path)).complete(_req())
    assert resp.from_cache and be2.calls == 0
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"digest", "model", "temperature", "messages_hash_input", "response_text", "timestamp"}


def test_truncated_journal_line_is_ignored(tmp_path):
    path = tmp_path / "cache.jsonl"
    Gateway(CountingBackend(), ResponseCache(path)).complete(_req("a"))
    with open(path, "ab") as fh:
        fh.write(b'{"digest": "abc", "response_te')  # simulated crash mid-write
    cache = ResponseCache(path)
    assert len(cache) == 1
    # later appends start on a fresh line
    Gateway(CountingBackend(), cache).complete(_req("b"))
    assert len(ResponseCache(path)) == 2


def test_concurrent_identical_requests_hit_network_once():
    class Slow(CountingBackend):
        def send(self, req, ordinal=0):
            import time
            time.sleep(0.01)
            return super().send(req, ordinal)

    be = Slow()
    gw = Gateway(be, max_in_flight=4)
    out = []
    threads = [threading.Thread(target=lambda: out.append(gw.complete(_req()))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert be.calls == 1
    assert len({r.text for r in out}) == 1


def _openai_backend(handler):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAIBackend("http://llm.test", api_key="k", client=client)


def test_openai_wire_format():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "curry"}}]})

    be = _openai_backend(handler)
    text = be.send(_req("hi", temperature=1.0))
    assert text == "curry"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["body"] == {"model": "gpt-3.5-turbo", "messages": [{"role": "user", "content": "hi"}],
                            "temperature": 1.0}


@pytest.mark.parametrize("status,exc", [(429, TransientError), (503, TransientError), (401, PermanentError)])
def test_openai_status_mapping(status, exc):
    be = _openai_backend(lambda r: httpx.Response(status, text="nope"))
    with pytest.raises(exc):
        be.send(_req())


def test_openai_malformed_json():
    be = _openai_backend(lambda r: httpx.Response(200, text="{not json"))
    with pytest.raises(DecodeError):
        be.send(_req())
    be = _openai_backend(lambda r: httpx.Response(200, json={"choices": []}))
    with pytest.raises(DecodeError):
        be.send(_req())


def test_openai_through_gateway_retries():
    statuses = [500, 200]

    def handler(request):
        s = statuses.pop(0)
        if s != 200:
            return httpx.Response(s)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    gw = Gateway(_openai_backend(handler), sleep=lambda s: None)
    assert gw.complete(_req(max_retries=1)) == ChatResponse("ok", False, 2)

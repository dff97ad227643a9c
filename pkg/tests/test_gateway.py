from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsprover.core import SamplingParams
from dsprover.errors import EndpointUnavailable, ProtocolError, ReplayMiss
from dsprover.gateway import (
    Completion,
    HttpChatBackend,
    ModelEndpoint,
    ModelGateway,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    ScriptedBackend,
    fingerprint,
    split_counts,
    strip_thinking,
)

MSGS = [{"role": "user", "content": "prove it"}]


def _ok(content="answer", reasoning=None, usage=None, n=1):
    msg = {"role": "assistant", "content": content}
    if reasoning is not None:
        msg["reasoning_content"] = reasoning
    return {"choices": [{"index": i, "message": msg} for i in range(n)], "usage": usage or {"completion_tokens": 10 * n}}


def _backend(handler, sleeps=None):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpChatBackend(client, backoff_base=0.5, sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_endpoint_rejects_bad_url():
    with pytest.raises(ValueError):
        ModelEndpoint("m", base_url="not a url")


def test_request_body_and_auth(monkeypatch):
    seen = {}

    def handler(req: httpx.Request):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers.get("authorization")
        seen["body"] = json.loads(req.content)
        return httpx.Response(200, json=_ok())

    monkeypatch.setenv("TEST_KEY", "sekrit")
    ep = ModelEndpoint("m", base_url="http://h:1/v1/", api_key_env="TEST_KEY", served_name="wire-m")
    out = _backend(handler).complete(ep, MSGS, SamplingParams(temperature=0.5, top_p=0.9, max_tokens=20, n=1, seed=3))
    assert out[0].text == "answer"
    assert seen["url"] == "http://h:1/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"]["model"] == "wire-m"
    assert seen["body"]["seed"] == 3 and seen["body"]["temperature"] == 0.5


def test_retries_with_exponential_backoff():
    calls = []
    sleeps = []

    def handler(req):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=_ok())

    ep = ModelEndpoint("m", max_retries=3)
    assert _backend(handler, sleeps).complete(ep, MSGS, SamplingParams())[0].text == "answer"
    assert sleeps == [0.5, 1.0]


def test_gives_up_after_retries():
    def handler(req):
        raise httpx.ConnectError("down")

    with pytest.raises(EndpointUnavailable):
        _backend(handler).complete(ModelEndpoint("m", max_retries=2), MSGS, SamplingParams())


def test_client_errors_are_not_retried():
    calls = []

    def handler(req):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(ProtocolError):
        _backend(handler).complete(ModelEndpoint("m"), MSGS, SamplingParams())
    assert len(calls) == 1


def test_malformed_body_is_protocol_error():
    with pytest.raises(ProtocolError):
        _backend(lambda r: httpx.Response(200, json={"nope": 1})).complete(ModelEndpoint("m"), MSGS, SamplingParams())
    with pytest.raises(ProtocolError):
        _backend(lambda r: httpx.Response(200, text="<html>")).complete(ModelEndpoint("m"), MSGS, SamplingParams())


def test_reasoning_content_is_wrapped_and_counted():
    usage = {"completion_tokens": 100, "completion_tokens_details": {"reasoning_tokens": 80}}
    out = _backend(lambda r: httpx.Response(200, json=_ok("final", "long thoughts", usage))).complete(
        ModelEndpoint("m"), MSGS, SamplingParams()
    )
    assert out[0].text == "<think>long thoughts</think>final"
    assert out[0].thinking_tokens == 80 and out[0].answer_tokens == 20
    assert strip_thinking(out[0].text) == "final"


def test_logprobs_are_summed():
    body = _ok("t")
    body["choices"][0]["logprobs"] = {"content": [{"token": "a", "logprob": -0.5}, {"token": "b", "logprob": -0.25}]}
    out = _backend(lambda r: httpx.Response(200, json=body)).complete(ModelEndpoint("m", logprobs=True), MSGS, SamplingParams())
    assert out[0].logprob == pytest.approx(-0.75)
    assert out[0].completion_tokens == 2


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("<think>abc</think>ans", "ans"),
        ("pre<think>x</think> mid<think>y</think>end", "pre midend"),
        ("reasoning only</think>\nanswer", "answer"),
        ("answer<think>never closed", "answer"),
        ("plain", "plain"),
    ],
)
def test_strip_thinking_cases(raw, expected):
    assert strip_thinking(raw) == expected


@given(st.text(alphabet="ab<>/thinkx ", max_size=60))
def test_strip_thinking_leaves_no_complete_region(raw):
    out = strip_thinking(raw)
    assert "</think>" not in out
    assert strip_thinking(out) == out.lstrip()


@given(st.integers(0, 10_000), st.lists(st.floats(0, 100), min_size=1, max_size=10))
def test_split_counts_sums_to_total(total, weights):
    parts = split_counts(total, weights)
    assert sum(parts) == total and all(p >= 0 for p in parts)


def test_fingerprint_depends_on_every_field():
    s = SamplingParams(temperature=0.5, seed=1)
    base = fingerprint("m", MSGS, s)
    assert base == fingerprint("m", [dict(MSGS[0])], s)
    assert base != fingerprint("m2", MSGS, s)
    assert base != fingerprint("m", MSGS, s.with_(seed=2))
    assert base != fingerprint("m", [{"role": "user", "content": "prove it!"}], s)


def test_record_then_replay(tmp_path):
    path = tmp_path / "t.jsonl"
    calls = []

    def script(ep, messages, sampling):
        calls.append(1)
        return [Completion("<think>hm</think>out", 12, 4, -1.5)]

    rec = RecordingBackend(ScriptedBackend(script), ReplayStore(path))
    ep = ModelEndpoint("m")
    s = SamplingParams(seed=9)
    first = rec.complete(ep, MSGS, s)
    assert rec.complete(ep, MSGS, s) == first and len(calls) == 1
    replay = ReplayBackend(ReplayStore(path))
    assert replay.complete(ep, MSGS, s) == first
    with pytest.raises(ReplayMiss):
        replay.complete(ep, MSGS, s.with_(seed=10))


def test_replay_store_skips_torn_line(tmp_path):
    path = tmp_path / "t.jsonl"
    store = ReplayStore(path)
    store.append("fp1", {"x": 1}, [Completion("a", 1, 0)])
    with path.open("a") as f:
        f.write('{"fingerprint": "fp2", "resp')
    again = ReplayStore(path)
    assert "fp1" in again and len(again) == 1


def test_gateway_shares_only_deterministic_requests():
    calls = []

    def script(ep, messages, sampling):
        calls.append(sampling.seed)
        return [f"reply {len(calls)}"]

    gw = ModelGateway({"m": ModelEndpoint("m")}, ScriptedBackend(script))
    seeded = SamplingParams(temperature=0.7, seed=5)
    assert gw.complete("m", MSGS, seeded) == gw.complete("m", MSGS, seeded)
    assert gw.cache_hits == 1 and gw.calls == 1
    free = SamplingParams(temperature=0.7)
    assert gw.complete("m", MSGS, free) != gw.complete("m", MSGS, free)
    assert gw.calls == 3
    with pytest.raises(EndpointUnavailable):
        gw.complete("unknown", MSGS, seeded)

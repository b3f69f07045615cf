import json

import requests

from rollout_gateway.mock_llm import (
    MockBackend,
    Scenario,
    ScriptedFailure,
    deterministic_logprob,
    parse_upstream_response,
)
from rollout_gateway.providers.canonical import CanonicalChatRequest
from rollout_gateway.tokenizer import EOT, render

import pytest

from conftest import make_scenario


def canonical_request(user_text="u", system_text="s"):
    return CanonicalChatRequest(
        model="m",
        messages=[{"role": "system", "content": system_text}, {"role": "user", "content": user_text}],
    )


class TestBackend:
    def test_prompt_ids_are_the_canonical_render(self):
        backend = MockBackend(make_scenario())
        resp = backend.serve_chat_completion(canonical_request())
        assert resp.prompt_token_ids == render(canonical_request().messages)

    def test_scripted_reply_tokens(self):
        backend = MockBackend(make_scenario([{"match": {"contains": "u"}, "reply": "A"}]))
        resp = backend.serve_chat_completion(canonical_request())
        assert resp.response_token_ids == [65, EOT]
        assert resp.finish_reason == "stop"

    def test_length_truncated_reply_has_no_end_of_turn(self):
        backend = MockBackend(make_scenario([{"reply": "A", "finish_reason": "length"}]))
        resp = backend.serve_chat_completion(canonical_request())
        assert resp.response_token_ids == [65]
        assert resp.finish_reason == "length"

    def test_determinism_across_backends(self):
        scenario = {"rules": [{"reply": "hello world"}], "default_reply": "ok"}
        r1 = MockBackend(Scenario.from_dict(scenario)).serve_chat_completion(canonical_request())
        r2 = MockBackend(Scenario.from_dict(scenario)).serve_chat_completion(canonical_request())
        assert r1.response_token_ids == r2.response_token_ids
        assert [e.logprob for e in r1.response_logprobs] == [e.logprob for e in r2.response_logprobs]

    def test_logprobs_strictly_negative_and_aligned(self):
        backend = MockBackend(make_scenario([{"reply": "some longer reply"}]))
        resp = backend.serve_chat_completion(canonical_request())
        assert len(resp.response_logprobs) == len(resp.response_token_ids)
        for k, entry in enumerate(resp.response_logprobs):
            assert entry.logprob < 0
            assert entry.logprob == deterministic_logprob(entry.token_id, k)
            assert entry.token_id == resp.response_token_ids[k]

    def test_rules_consume_in_order_per_session(self):
        backend = MockBackend(make_scenario([{"reply": "first"}, {"reply": "second"}]))
        a = backend.serve_chat_completion(canonical_request(), session_key="s1")
        b = backend.serve_chat_completion(canonical_request(), session_key="s1")
        c = backend.serve_chat_completion(canonical_request(), session_key="s1")
        assert a.message["content"] == "first"
        assert b.message["content"] == "second"
        assert c.message["content"] == "ok"  # default after rules exhausted

    def test_cursors_are_per_session(self):
        backend = MockBackend(make_scenario([{"reply": "only"}]))
        a = backend.serve_chat_completion(canonical_request(), session_key="s1")
        b = backend.serve_chat_completion(canonical_request(), session_key="s2")
        assert a.message["content"] == b.message["content"] == "only"

    def test_match_rules_select_by_latest_user_message(self):
        backend = MockBackend(
            make_scenario(
                [
                    {"match": {"contains": "beta"}, "reply": "B"},
                    {"match": {"contains": "alpha"}, "reply": "A"},
                ]
            )
        )
        resp = backend.serve_chat_completion(canonical_request(user_text="say alpha"))
        assert resp.message["content"] == "A"

    def test_unmatched_request_gets_default_reply(self):
        backend = MockBackend(make_scenario([{"match": {"equals": "exact"}, "reply": "E"}], default_reply="dflt"))
        resp = backend.serve_chat_completion(canonical_request(user_text="not it"))
        assert resp.message["content"] == "dflt"

    def test_tool_call_emission(self):
        backend = MockBackend(
            make_scenario([{"reply": "", "tool_calls": [{"name": "ls", "arguments": {"path": "."}}]}])
        )
        resp = backend.serve_chat_completion(canonical_request())
        assert resp.finish_reason == "tool_calls"
        call = resp.message["tool_calls"][0]
        assert call["name"] == "ls"
        assert json.loads(call["arguments"]) == {"path": "."}
        assert resp.response_token_ids[-1] == EOT

    def test_scripted_failure(self):
        backend = MockBackend(make_scenario([{"fail": True}]))
        with pytest.raises(ScriptedFailure):
            backend.serve_chat_completion(canonical_request())


class TestHttpSurface:
    def test_upstream_document_roundtrip(self, mock_llm):
        payload = canonical_request("hi").to_dict()
        payload["session_id"] = "s-http"
        resp = requests.post(mock_llm.url + "/v1/chat/completions", json=payload, timeout=10)
        assert resp.status_code == 200
        doc = resp.json()
        assert doc["prompt_token_ids"] == render(canonical_request("hi").messages)
        parsed = parse_upstream_response(doc)
        assert parsed.response_token_ids == [e.token_id for e in parsed.response_logprobs]
        assert parsed.finish_reason == "stop"
        assert parsed.usage["prompt_tokens"] == len(doc["prompt_token_ids"])

    def test_scripted_failure_maps_to_500(self):
        from rollout_gateway.mock_llm import MockLlmService

        service = MockLlmService(make_scenario([{"fail": True}])).start()
        try:
            payload = canonical_request("x").to_dict()
            resp = requests.post(service.url + "/v1/chat/completions", json=payload, timeout=10)
            assert resp.status_code == 500
        finally:
            service.stop()

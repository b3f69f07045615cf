"""Deterministic, token-ID-faithful chat-completions backend for desk-scale runs.

Serves a chat-completions-shaped endpoint over canonical messages and returns
the extension fields the capture path requires: top-level `prompt_token_ids`
and a `token_id` inside every logprob entry. Replies are scripted through a
Scenario; unmatched requests get a fixed default reply, so any harness can be
driven without GPUs while staying bit-exact across runs.

Scenario file schema (JSON):

    {
      "default_reply": "ok",
      "rules": [
        {"match": {"contains": "plan"},     # or {"equals": "..."}; omit = always
         "reply": "text of the reply",
         "finish_reason": "stop",
         "tool_calls": [{"name": "ls", "arguments": {"path": "."}}],
         "hang_seconds": 0,
         "fail": false}
      ]
    }

Rules are consumed in order, at most once per session; matching is against
the latest user/tool message.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .httpd import HttpService, Request, Response, Router, json_error
from .model import Json, LogprobEntry
from .providers.canonical import CanonicalChatRequest, CanonicalChatResponse
from .tokenizer import EOT, decode_token, message_body_tokens, render

log = logging.getLogger(__name__)


class ScriptedFailure(Exception):
    """A scenario rule directed the backend to fail this request."""


@dataclass(frozen=True)
class ScenarioRule:
    reply: str = ""
    finish_reason: str = "stop"
    match: Optional[Json] = None
    tool_calls: tuple[Json, ...] = ()
    hang_seconds: float = 0.0
    fail: bool = False

    def matches(self, latest: str) -> bool:
        if self.match is None:
            return True
        if "equals" in self.match:
            return latest == self.match["equals"]
        if "contains" in self.match:
            return self.match["contains"] in latest
        return False


@dataclass
class Scenario:
    rules: list[ScenarioRule] = field(default_factory=list)
    default_reply: str = "ok"

    @classmethod
    def from_dict(cls, d: Json) -> "Scenario":
        rules = [
            ScenarioRule(
                reply=r.get("reply", ""),
                finish_reason=r.get("finish_reason", "stop"),
                match=r.get("match"),
                tool_calls=tuple(r.get("tool_calls") or ()),
                hang_seconds=float(r.get("hang_seconds", 0.0)),
                fail=bool(r.get("fail", False)),
            )
            for r in d.get("rules") or []
        ]
        return cls(rules=rules, default_reply=d.get("default_reply", "ok"))

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def deterministic_logprob(token_id: int, position: int) -> float:
    # Arbitrary but fixed; strictly negative so captured entries are valid.
    return -0.001 * ((token_id + position) % 7) - 0.001


def _latest_user_or_tool_text(messages: list[Json]) -> str:
    for message in reversed(messages):
        if message.get("role") in ("user", "tool"):
            return str(message.get("content") or "")
    return ""


class MockBackend:
    """Scenario-driven completion engine; cursors are per session and serialized."""

    def __init__(self, scenario: Optional[Scenario] = None) -> None:
        self.scenario = scenario or Scenario()
        self._lock = threading.Lock()
        self._consumed: dict[str, set[int]] = {}
        self._seq: dict[str, int] = {}

    def _pick_rule(self, session_key: str, latest: str) -> Optional[ScenarioRule]:
        with self._lock:
            consumed = self._consumed.setdefault(session_key, set())
            for index, rule in enumerate(self.scenario.rules):
                if index in consumed:
                    continue
                if rule.matches(latest):
                    consumed.add(index)
                    return rule
        return None

    def _next_seq(self, session_key: str) -> int:
        with self._lock:
            self._seq[session_key] = self._seq.get(session_key, 0) + 1
            return self._seq[session_key]

    def serve_chat_completion(self, request: CanonicalChatRequest, session_key: str = "") -> CanonicalChatResponse:
        prompt_ids = render(request.messages)
        latest = _latest_user_or_tool_text(request.messages)
        rule = self._pick_rule(session_key, latest)
        seq = self._next_seq(session_key)

        if rule is not None and rule.hang_seconds > 0:
            time.sleep(rule.hang_seconds)
        if rule is not None and rule.fail:
            raise ScriptedFailure("scenario directed failure")

        if rule is None:
            reply, finish, raw_calls = self.scenario.default_reply, "stop", ()
        else:
            reply, finish, raw_calls = rule.reply, rule.finish_reason, rule.tool_calls

        message: Json = {"role": "assistant", "content": reply}
        if raw_calls:
            message["tool_calls"] = [
                {
                    "id": f"call_s{seq}_{k}",
                    "name": c.get("name", ""),
                    "arguments": c.get("arguments", {})
                    if isinstance(c.get("arguments"), str)
                    else json.dumps(c.get("arguments", {}), sort_keys=True, separators=(",", ":"), ensure_ascii=False),
                }
                for k, c in enumerate(raw_calls)
            ]
            finish = "tool_calls"

        response_ids = message_body_tokens(message)
        if finish != "length":
            response_ids = response_ids + [EOT]
        logprobs = [
            LogprobEntry(token_id=t, logprob=deterministic_logprob(t, k), token=decode_token(t))
            for k, t in enumerate(response_ids)
        ]
        return CanonicalChatResponse(
            response_messages=[message],
            finish_reason=finish,
            prompt_token_ids=prompt_ids,
            response_token_ids=response_ids,
            response_logprobs=logprobs,
            usage={"prompt_tokens": len(prompt_ids), "completion_tokens": len(response_ids)},
        )


def _response_doc(resp: CanonicalChatResponse) -> Json:
    """Chat-completions-shaped upstream document plus the capture extensions."""
    return {
        "id": "mock-cmpl",
        "object": "chat.completion",
        "model": "mock",
        "choices": [
            {
                "index": 0,
                "message": resp.message,
                "finish_reason": resp.finish_reason,
                "logprobs": {
                    "content": [
                        {"token": e.token, "token_id": e.token_id, "logprob": e.logprob} for e in resp.response_logprobs
                    ]
                },
            }
        ],
        "prompt_token_ids": list(resp.prompt_token_ids),
        "usage": dict(resp.usage),
    }


def parse_upstream_response(doc: Json) -> CanonicalChatResponse:
    """Decode the upstream document back into the canonical response (gateway side)."""
    choice = (doc.get("choices") or [{}])[0]
    entries = [
        LogprobEntry(token_id=int(e["token_id"]), logprob=float(e["logprob"]), token=e.get("token"))
        for e in ((choice.get("logprobs") or {}).get("content") or [])
    ]
    return CanonicalChatResponse(
        response_messages=[choice.get("message") or {"role": "assistant", "content": ""}],
        finish_reason=choice.get("finish_reason", "stop"),
        prompt_token_ids=list(doc.get("prompt_token_ids") or []),
        response_token_ids=[e.token_id for e in entries],
        response_logprobs=entries,
        usage=dict(doc.get("usage") or {}),
    )


def upstream_request_doc(request: CanonicalChatRequest, session_key: str) -> Json:
    doc = request.to_dict()
    doc["logprobs"] = True
    doc["session_id"] = session_key
    return doc


class MockLlmService:
    """HTTP wrapper: POST /v1/chat/completions in, extension-bearing document out."""

    def __init__(self, scenario: Optional[Scenario] = None, host: str = "127.0.0.1", port: int = 0) -> None:
        self.backend = MockBackend(scenario)
        router = Router()
        router.add("POST", r"/v1/chat/completions", self._serve)
        router.add("GET", r"/healthz", lambda req: Response(payload={"ok": True}))
        self.http = HttpService(router, host=host, port=port, name="mock-llm")

    @property
    def url(self) -> str:
        return self.http.url

    def _serve(self, request: Request) -> Response:
        payload = request.json()
        canonical = CanonicalChatRequest.from_dict(payload)
        session_key = str(payload.get("session_id") or "")
        try:
            resp = self.backend.serve_chat_completion(canonical, session_key)
        except ScriptedFailure as exc:
            return json_error(500, str(exc))
        return Response(payload=_response_doc(resp))

    def start(self) -> "MockLlmService":
        self.http.start()
        log.info("mock llm listening on %s", self.url)
        return self

    def stop(self) -> None:
        self.http.stop()

"""OpenAI Chat Completions dialect: the near-identity mapping onto the canonical shape."""

from __future__ import annotations

import json
from typing import Any, Optional

from ..model import Json
from .canonical import (
    CanonicalChatRequest,
    CanonicalChatResponse,
    MalformedPayloadError,
    assistant_message,
    chunk_text,
    reject_content_kind,
    require,
    short_digest as _digest,
    text_message,
    tool_call,
    tool_message,
)

_NAME = "openai_chat"

_FINISH_TO_PROVIDER = {"stop": "stop", "length": "length", "tool_calls": "tool_calls", "error": "stop"}
_PROVIDER_TO_FINISH = {"stop": "stop", "length": "length", "tool_calls": "tool_calls", "content_filter": "stop"}


def _flatten_content(content: Any) -> str:
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    pieces = []
    for part in content:
        kind = part.get("type") if isinstance(part, dict) else None
        if kind == "text":
            pieces.append(part.get("text", ""))
        else:
            reject_content_kind(_NAME, str(kind))
    return "".join(pieces)


def _parse_tool_calls(raw_calls: list[Json]) -> list[Json]:
    calls = []
    for raw in raw_calls:
        fn = raw.get("function") or {}
        calls.append(tool_call(raw.get("id", ""), fn.get("name", ""), fn.get("arguments", "")))
    return calls


def parse_request(payload: Json) -> CanonicalChatRequest:
    messages: list[Json] = []
    for raw in require(payload, "messages", list, _NAME):
        if not isinstance(raw, dict):
            raise MalformedPayloadError(f"{_NAME}: message entries must be objects")
        role = raw.get("role")
        if role in ("system", "developer"):
            messages.append(text_message("system", _flatten_content(raw.get("content"))))
        elif role == "user":
            messages.append(text_message("user", _flatten_content(raw.get("content"))))
        elif role == "assistant":
            calls = _parse_tool_calls(raw.get("tool_calls") or [])
            messages.append(assistant_message(_flatten_content(raw.get("content")), calls))
        elif role == "tool":
            messages.append(tool_message(raw.get("tool_call_id", ""), _flatten_content(raw.get("content"))))
        else:
            raise MalformedPayloadError(f"{_NAME}: unknown message role {role!r}")

    tools = None
    if payload.get("tools"):
        tools = [
            {
                "name": (t.get("function") or {}).get("name", ""),
                "description": (t.get("function") or {}).get("description", ""),
                "parameters": (t.get("function") or {}).get("parameters") or {},
            }
            for t in payload["tools"]
        ]

    tool_choice = None
    raw_choice = payload.get("tool_choice")
    if isinstance(raw_choice, str):
        tool_choice = raw_choice
    elif isinstance(raw_choice, dict):
        tool_choice = {"name": (raw_choice.get("function") or {}).get("name", "")}

    stop = payload.get("stop")
    if isinstance(stop, str):
        stop = [stop]

    return CanonicalChatRequest(
        model=payload.get("model", ""),
        messages=messages,
        tools=tools,
        tool_choice=tool_choice,
        stop=list(stop) if stop else None,
        max_tokens=payload.get("max_tokens", payload.get("max_completion_tokens")),
        temperature=payload.get("temperature"),
        top_p=payload.get("top_p"),
        logprobs_requested=True,
        stream_requested_by_harness=bool(payload.get("stream", False)),
    )


def _emit_tool_calls(calls: list[Json]) -> list[Json]:
    return [
        {"id": c.get("id", ""), "type": "function", "function": {"name": c.get("name", ""), "arguments": c.get("arguments", "")}}
        for c in calls
    ]


def emit_request(req: CanonicalChatRequest) -> Json:
    payload: Json = {"model": req.model, "messages": []}
    for msg in req.messages:
        role = msg.get("role")
        out: Json = {"role": role, "content": msg.get("content") or ""}
        if role == "assistant" and msg.get("tool_calls"):
            out["tool_calls"] = _emit_tool_calls(msg["tool_calls"])
            if not msg.get("content"):
                out["content"] = None
        if role == "tool":
            out["tool_call_id"] = msg.get("tool_call_id", "")
        payload["messages"].append(out)
    if req.tools:
        payload["tools"] = [
            {
                "type": "function",
                "function": {"name": t["name"], "description": t.get("description", ""), "parameters": t.get("parameters") or {}},
            }
            for t in req.tools
        ]
    if req.tool_choice is not None:
        if isinstance(req.tool_choice, dict):
            payload["tool_choice"] = {"type": "function", "function": {"name": req.tool_choice.get("name", "")}}
        else:
            payload["tool_choice"] = req.tool_choice
    if req.stop:
        payload["stop"] = list(req.stop)
    if req.max_tokens is not None:
        payload["max_tokens"] = req.max_tokens
    if req.temperature is not None:
        payload["temperature"] = req.temperature
    if req.top_p is not None:
        payload["top_p"] = req.top_p
    if req.stream_requested_by_harness:
        payload["stream"] = True
    payload["logprobs"] = True
    return payload


def emit_response(resp: CanonicalChatResponse) -> Json:
    message = resp.message
    calls = message.get("tool_calls") or []
    content: Optional[str] = message.get("content") or ""
    if calls and not content:
        content = None
    out_message: Json = {"role": "assistant", "content": content}
    if calls:
        out_message["tool_calls"] = _emit_tool_calls(calls)
    return {
        "id": f"chatcmpl-{_digest(resp.response_token_ids, message.get('content') or '')}",
        "object": "chat.completion",
        "created": 0,
        "model": "",
        "choices": [
            {
                "index": 0,
                "message": out_message,
                "finish_reason": _FINISH_TO_PROVIDER.get(resp.finish_reason, "stop"),
                "logprobs": None,
            }
        ],
        "usage": {
            "prompt_tokens": resp.usage.get("prompt_tokens", 0),
            "completion_tokens": resp.usage.get("completion_tokens", 0),
            "total_tokens": resp.usage.get("prompt_tokens", 0) + resp.usage.get("completion_tokens", 0),
        },
    }


def parse_response(doc: Json) -> tuple[Json, str]:
    choice = (doc.get("choices") or [{}])[0]
    raw_message = choice.get("message") or {}
    calls = _parse_tool_calls(raw_message.get("tool_calls") or [])
    message = assistant_message(raw_message.get("content") or "", calls)
    finish = _PROVIDER_TO_FINISH.get(choice.get("finish_reason") or "stop", "stop")
    return message, finish


def _chunk(data: Json) -> str:
    return "data: " + json.dumps(data, sort_keys=True, ensure_ascii=False)


def _chunk_envelope(resp_id: str, delta: Json, finish_reason: Optional[str]) -> Json:
    return {
        "id": resp_id,
        "object": "chat.completion.chunk",
        "created": 0,
        "model": "",
        "choices": [{"index": 0, "delta": delta, "finish_reason": finish_reason}],
    }


def emit_stream(resp: CanonicalChatResponse) -> list[str]:
    doc = emit_response(resp)
    resp_id = doc["id"]
    message = doc["choices"][0]["message"]
    events = [_chunk(_chunk_envelope(resp_id, {"role": "assistant"}, None))]
    for piece in chunk_text(message.get("content") or ""):
        events.append(_chunk(_chunk_envelope(resp_id, {"content": piece}, None)))
    for call_index, call in enumerate(message.get("tool_calls") or []):
        head = {
            "tool_calls": [
                {
                    "index": call_index,
                    "id": call["id"],
                    "type": "function",
                    "function": {"name": call["function"]["name"], "arguments": ""},
                }
            ]
        }
        events.append(_chunk(_chunk_envelope(resp_id, head, None)))
        for piece in chunk_text(call["function"]["arguments"]):
            delta = {"tool_calls": [{"index": call_index, "function": {"arguments": piece}}]}
            events.append(_chunk(_chunk_envelope(resp_id, delta, None)))
    events.append(_chunk(_chunk_envelope(resp_id, {}, doc["choices"][0]["finish_reason"])))
    events.append("data: [DONE]")
    return events


def reassemble_stream(events: list[str]) -> tuple[Json, str]:
    content = ""
    calls: dict[int, Json] = {}
    finish: Optional[str] = None
    for event in events:
        body = event[len("data:") :].strip() if event.startswith("data:") else event
        if body == "[DONE]":
            break
        data = json.loads(body)
        choice = (data.get("choices") or [{}])[0]
        delta = choice.get("delta") or {}
        if delta.get("content"):
            content += delta["content"]
        for raw in delta.get("tool_calls") or []:
            slot = calls.setdefault(raw["index"], {"id": "", "name": "", "arguments": ""})
            if raw.get("id"):
                slot["id"] = raw["id"]
            fn = raw.get("function") or {}
            if fn.get("name"):
                slot["name"] = fn["name"]
            slot["arguments"] += fn.get("arguments", "")
        if choice.get("finish_reason"):
            finish = choice["finish_reason"]
    call_list = [tool_call(calls[i]["id"], calls[i]["name"], calls[i]["arguments"]) for i in sorted(calls)]
    return assistant_message(content, call_list), _PROVIDER_TO_FINISH.get(finish or "stop", "stop")

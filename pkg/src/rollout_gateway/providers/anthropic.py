"""Anthropic Messages dialect: /v1/messages requests, responses, and event streams."""

from __future__ import annotations

import json
from typing import Any, Optional

from ..model import Json
from .canonical import (
    CanonicalChatRequest,
    CanonicalChatResponse,
    MalformedPayloadError,
    ProviderError,
    assistant_message,
    chunk_text,
    parse_arguments,
    reject_content_kind,
    require,
    short_digest,
    text_message,
    tool_call,
    tool_message,
)

_NAME = "anthropic_messages"

# canonical finish_reason <-> Anthropic stop_reason (error has no analog; end_turn)
_FINISH_TO_STOP = {"stop": "end_turn", "length": "max_tokens", "tool_calls": "tool_use", "error": "end_turn"}
_STOP_TO_FINISH = {"end_turn": "stop", "max_tokens": "length", "tool_use": "tool_calls", "stop_sequence": "stop"}


def _part_text(content: Any) -> str:
    """Join the text of a string-or-text-block-list content field."""
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    pieces = []
    for part in content:
        if isinstance(part, dict) and part.get("type") == "text":
            pieces.append(part.get("text", ""))
        else:
            reject_content_kind(_NAME, str(part.get("type") if isinstance(part, dict) else type(part).__name__))
    return "".join(pieces)


def parse_request(payload: Json) -> CanonicalChatRequest:
    messages: list[Json] = []

    system = payload.get("system")
    if system is not None:
        messages.append(text_message("system", _part_text(system)))

    raw_messages = require(payload, "messages", list, _NAME)
    for raw in raw_messages:
        if not isinstance(raw, dict):
            raise MalformedPayloadError(f"{_NAME}: message entries must be objects")
        role = raw.get("role")
        content = raw.get("content")
        if role == "assistant":
            text_parts: list[str] = []
            calls: list[Json] = []
            if isinstance(content, str):
                text_parts.append(content)
            else:
                for part in content or []:
                    kind = part.get("type")
                    if kind == "text":
                        text_parts.append(part.get("text", ""))
                    elif kind == "tool_use":
                        calls.append(tool_call(part.get("id", ""), part.get("name", ""), part.get("input", {})))
                    else:
                        reject_content_kind(_NAME, str(kind))
            messages.append(assistant_message("".join(text_parts), calls))
        elif role == "user":
            if isinstance(content, str):
                messages.append(text_message("user", content))
                continue
            # Mixed text + tool_result parts are preserved as interleaved
            # canonical messages in part order.
            pending: list[str] = []
            for part in content or []:
                kind = part.get("type")
                if kind == "text":
                    pending.append(part.get("text", ""))
                elif kind == "tool_result":
                    if pending:
                        messages.append(text_message("user", "".join(pending)))
                        pending = []
                    messages.append(tool_message(part.get("tool_use_id", ""), _part_text(part.get("content"))))
                else:
                    reject_content_kind(_NAME, str(kind))
            if pending or not (content or []):
                messages.append(text_message("user", "".join(pending)))
        else:
            raise MalformedPayloadError(f"{_NAME}: unknown message role {role!r}")

    tools = None
    if payload.get("tools"):
        tools = [
            {
                "name": t.get("name", ""),
                "description": t.get("description", ""),
                "parameters": t.get("input_schema") or {},
            }
            for t in payload["tools"]
        ]

    tool_choice = None
    raw_choice = payload.get("tool_choice")
    if isinstance(raw_choice, dict):
        kind = raw_choice.get("type")
        if kind == "auto":
            tool_choice = "auto"
        elif kind == "any":
            tool_choice = "required"
        elif kind == "tool":
            tool_choice = {"name": raw_choice.get("name", "")}
        elif kind == "none":
            tool_choice = "none"

    stop = payload.get("stop_sequences")
    return CanonicalChatRequest(
        model=payload.get("model", ""),
        messages=messages,
        tools=tools,
        tool_choice=tool_choice,
        stop=list(stop) if stop else None,
        max_tokens=payload.get("max_tokens"),
        temperature=payload.get("temperature"),
        top_p=payload.get("top_p"),
        logprobs_requested=True,
        stream_requested_by_harness=bool(payload.get("stream", False)),
    )


def emit_request(req: CanonicalChatRequest) -> Json:
    payload: Json = {"model": req.model, "messages": []}

    messages = list(req.messages)
    system_texts = []
    while messages and messages[0].get("role") == "system":
        system_texts.append(messages.pop(0).get("content") or "")
    if system_texts:
        payload["system"] = "\n\n".join(system_texts)

    i = 0
    while i < len(messages):
        msg = messages[i]
        role = msg.get("role")
        if role == "assistant":
            calls = msg.get("tool_calls") or []
            if not calls:
                payload["messages"].append({"role": "assistant", "content": msg.get("content") or ""})
            else:
                parts: list[Json] = []
                if msg.get("content"):
                    parts.append({"type": "text", "text": msg["content"]})
                for call in calls:
                    parts.append(
                        {
                            "type": "tool_use",
                            "id": call.get("id", ""),
                            "name": call.get("name", ""),
                            "input": parse_arguments(call.get("arguments", "")),
                        }
                    )
                payload["messages"].append({"role": "assistant", "content": parts})
            i += 1
        elif role in ("user", "tool"):
            # Group a run of user/tool messages into one Anthropic user turn.
            parts = []
            plain_only = True
            while i < len(messages) and messages[i].get("role") in ("user", "tool"):
                m = messages[i]
                if m.get("role") == "tool":
                    plain_only = False
                    parts.append(
                        {
                            "type": "tool_result",
                            "tool_use_id": m.get("tool_call_id", ""),
                            "content": m.get("content") or "",
                        }
                    )
                else:
                    parts.append({"type": "text", "text": m.get("content") or ""})
                i += 1
            if plain_only and len(parts) == 1:
                payload["messages"].append({"role": "user", "content": parts[0]["text"]})
            else:
                payload["messages"].append({"role": "user", "content": parts})
        else:
            raise ProviderError(f"{_NAME}: cannot emit non-leading {role!r} message")

    if req.tools:
        payload["tools"] = [
            {"name": t["name"], "description": t.get("description", ""), "input_schema": t.get("parameters") or {}}
            for t in req.tools
        ]
    if req.tool_choice is not None:
        if req.tool_choice == "auto":
            payload["tool_choice"] = {"type": "auto"}
        elif req.tool_choice == "required":
            payload["tool_choice"] = {"type": "any"}
        elif req.tool_choice == "none":
            payload["tool_choice"] = {"type": "none"}
        elif isinstance(req.tool_choice, dict):
            payload["tool_choice"] = {"type": "tool", "name": req.tool_choice.get("name", "")}
    if req.stop:
        payload["stop_sequences"] = list(req.stop)
    if req.max_tokens is not None:
        payload["max_tokens"] = req.max_tokens
    if req.temperature is not None:
        payload["temperature"] = req.temperature
    if req.top_p is not None:
        payload["top_p"] = req.top_p
    if req.stream_requested_by_harness:
        payload["stream"] = True
    return payload


def _content_blocks(message: Json) -> list[Json]:
    blocks: list[Json] = []
    if message.get("content"):
        blocks.append({"type": "text", "text": message["content"]})
    for call in message.get("tool_calls") or []:
        blocks.append(
            {
                "type": "tool_use",
                "id": call.get("id", ""),
                "name": call.get("name", ""),
                "input": parse_arguments(call.get("arguments", "")),
            }
        )
    return blocks


def emit_response(resp: CanonicalChatResponse) -> Json:
    message = resp.message
    return {
        "id": f"msg_{short_digest(resp.response_token_ids, message.get('content') or '')}",
        "type": "message",
        "role": "assistant",
        "model": "",
        "content": _content_blocks(message),
        "stop_reason": _FINISH_TO_STOP.get(resp.finish_reason, "end_turn"),
        "stop_sequence": None,
        "usage": {
            "input_tokens": resp.usage.get("prompt_tokens", 0),
            "output_tokens": resp.usage.get("completion_tokens", 0),
        },
    }


def parse_response(doc: Json) -> tuple[Json, str]:
    texts: list[str] = []
    calls: list[Json] = []
    for block in doc.get("content") or []:
        kind = block.get("type")
        if kind == "text":
            texts.append(block.get("text", ""))
        elif kind == "tool_use":
            calls.append(tool_call(block.get("id", ""), block.get("name", ""), block.get("input", {})))
    finish = _STOP_TO_FINISH.get(doc.get("stop_reason") or "end_turn", "stop")
    return assistant_message("".join(texts), calls), finish


def _event(kind: str, data: Json) -> str:
    return f"event: {kind}\ndata: {json.dumps(data, sort_keys=True, ensure_ascii=False)}"


def emit_stream(resp: CanonicalChatResponse) -> list[str]:
    doc = emit_response(resp)
    events = [
        _event(
            "message_start",
            {
                "type": "message_start",
                "message": {
                    "id": doc["id"],
                    "type": "message",
                    "role": "assistant",
                    "model": doc["model"],
                    "content": [],
                    "stop_reason": None,
                    "usage": {"input_tokens": doc["usage"]["input_tokens"], "output_tokens": 0},
                },
            },
        )
    ]
    for index, block in enumerate(doc["content"]):
        if block["type"] == "text":
            events.append(
                _event(
                    "content_block_start",
                    {"type": "content_block_start", "index": index, "content_block": {"type": "text", "text": ""}},
                )
            )
            for piece in chunk_text(block["text"]):
                events.append(
                    _event(
                        "content_block_delta",
                        {
                            "type": "content_block_delta",
                            "index": index,
                            "delta": {"type": "text_delta", "text": piece},
                        },
                    )
                )
        else:
            events.append(
                _event(
                    "content_block_start",
                    {
                        "type": "content_block_start",
                        "index": index,
                        "content_block": {
                            "type": "tool_use",
                            "id": block["id"],
                            "name": block["name"],
                            "input": {},
                        },
                    },
                )
            )
            raw_args = json.dumps(block["input"], sort_keys=True, separators=(",", ":"), ensure_ascii=False)
            for piece in chunk_text(raw_args):
                events.append(
                    _event(
                        "content_block_delta",
                        {
                            "type": "content_block_delta",
                            "index": index,
                            "delta": {"type": "input_json_delta", "partial_json": piece},
                        },
                    )
                )
        events.append(_event("content_block_stop", {"type": "content_block_stop", "index": index}))
    events.append(
        _event(
            "message_delta",
            {
                "type": "message_delta",
                "delta": {"stop_reason": doc["stop_reason"], "stop_sequence": None},
                "usage": {"output_tokens": doc["usage"]["output_tokens"]},
            },
        )
    )
    events.append(_event("message_stop", {"type": "message_stop"}))
    return events


def reassemble_stream(events: list[str]) -> tuple[Json, str]:
    """Rebuild the assistant message from a synthetic event stream."""
    blocks: dict[int, Json] = {}
    stop_reason: Optional[str] = None
    for event in events:
        data = _event_data(event)
        kind = data.get("type")
        if kind == "content_block_start":
            blocks[data["index"]] = dict(data["content_block"])
            blocks[data["index"]].setdefault("_text", "")
            blocks[data["index"]].setdefault("_json", "")
        elif kind == "content_block_delta":
            delta = data["delta"]
            block = blocks[data["index"]]
            if delta["type"] == "text_delta":
                block["_text"] += delta["text"]
            elif delta["type"] == "input_json_delta":
                block["_json"] += delta["partial_json"]
        elif kind == "message_delta":
            stop_reason = data["delta"].get("stop_reason")
    texts = []
    calls = []
    for index in sorted(blocks):
        block = blocks[index]
        if block["type"] == "text":
            texts.append(block["_text"])
        else:
            calls.append(tool_call(block["id"], block["name"], json.loads(block["_json"]) if block["_json"] else {}))
    finish = _STOP_TO_FINISH.get(stop_reason or "end_turn", "stop")
    return assistant_message("".join(texts), calls), finish


def _event_data(event: str) -> Json:
    for line in event.splitlines():
        if line.startswith("data:"):
            return json.loads(line[len("data:") :].strip())
    return {}

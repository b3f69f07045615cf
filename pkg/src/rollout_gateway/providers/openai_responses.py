"""OpenAI Responses dialect: item-list inputs flattened onto canonical messages.

Function-call items merge into the assistant message that precedes them, and
reasoning items are normalized into assistant text; neither distinction
survives in the canonical form, which is deliberate - the capture path only
needs text and tool structure.
"""

from __future__ import annotations

import json
from typing import Any

from ..model import Json
from .canonical import (
    CanonicalChatRequest,
    CanonicalChatResponse,
    MalformedPayloadError,
    assistant_message,
    chunk_text,
    reject_content_kind,
    short_digest,
    text_message,
    tool_call,
    tool_message,
)

_NAME = "openai_responses"


def _item_text(content: Any) -> str:
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    pieces = []
    for part in content:
        kind = part.get("type") if isinstance(part, dict) else None
        if kind in ("input_text", "output_text", "text", "summary_text"):
            pieces.append(part.get("text", ""))
        elif kind == "refusal":
            pieces.append(part.get("refusal", ""))
        else:
            reject_content_kind(_NAME, str(kind))
    return "".join(pieces)


def _append_call(messages: list[Json], call: Json) -> None:
    """Attach a function call to the preceding assistant message, or start one."""
    if messages and messages[-1].get("role") == "assistant":
        messages[-1].setdefault("tool_calls", []).append(call)
    else:
        messages.append(assistant_message("", [call]))


def parse_request(payload: Json) -> CanonicalChatRequest:
    messages: list[Json] = []
    if payload.get("instructions"):
        messages.append(text_message("system", payload["instructions"]))

    raw_input = payload.get("input")
    if raw_input is None:
        raise MalformedPayloadError(f"{_NAME}: missing required field 'input'")
    if isinstance(raw_input, str):
        messages.append(text_message("user", raw_input))
    else:
        for item in raw_input:
            if not isinstance(item, dict):
                raise MalformedPayloadError(f"{_NAME}: input items must be objects")
            kind = item.get("type", "message")
            if kind == "message":
                role = item.get("role", "user")
                if role in ("system", "developer"):
                    messages.append(text_message("system", _item_text(item.get("content"))))
                elif role == "assistant":
                    messages.append(assistant_message(_item_text(item.get("content"))))
                else:
                    messages.append(text_message("user", _item_text(item.get("content"))))
            elif kind == "function_call":
                _append_call(
                    messages,
                    tool_call(item.get("call_id", ""), item.get("name", ""), item.get("arguments", "")),
                )
            elif kind == "function_call_output":
                output = item.get("output", "")
                if not isinstance(output, str):
                    output = json.dumps(output, sort_keys=True, ensure_ascii=False)
                messages.append(tool_message(item.get("call_id", ""), output))
            elif kind == "reasoning":
                text = _item_text(item.get("summary")) or _item_text(item.get("content"))
                messages.append(assistant_message(text))
            else:
                reject_content_kind(_NAME, str(kind))

    tools = None
    if payload.get("tools"):
        tools = [
            {"name": t.get("name", ""), "description": t.get("description", ""), "parameters": t.get("parameters") or {}}
            for t in payload["tools"]
        ]

    tool_choice = None
    raw_choice = payload.get("tool_choice")
    if isinstance(raw_choice, str):
        tool_choice = raw_choice
    elif isinstance(raw_choice, dict):
        tool_choice = {"name": raw_choice.get("name", "")}

    return CanonicalChatRequest(
        model=payload.get("model", ""),
        messages=messages,
        tools=tools,
        tool_choice=tool_choice,
        stop=None,  # the Responses dialect has no stop-sequence control
        max_tokens=payload.get("max_output_tokens"),
        temperature=payload.get("temperature"),
        top_p=payload.get("top_p"),
        logprobs_requested=True,
        stream_requested_by_harness=bool(payload.get("stream", False)),
    )


def emit_request(req: CanonicalChatRequest) -> Json:
    payload: Json = {"model": req.model, "input": []}
    messages = list(req.messages)
    if messages and messages[0].get("role") == "system":
        payload["instructions"] = messages.pop(0).get("content") or ""
    for msg in messages:
        role = msg.get("role")
        if role == "system":
            payload["input"].append(
                {"type": "message", "role": "system", "content": [{"type": "input_text", "text": msg.get("content") or ""}]}
            )
        elif role == "user":
            payload["input"].append(
                {"type": "message", "role": "user", "content": [{"type": "input_text", "text": msg.get("content") or ""}]}
            )
        elif role == "assistant":
            # Always emit the message item (even when empty) so the call items
            # re-merge onto it during normalization.
            payload["input"].append(
                {
                    "type": "message",
                    "role": "assistant",
                    "content": [{"type": "output_text", "text": msg.get("content") or ""}],
                }
            )
            for call in msg.get("tool_calls") or []:
                payload["input"].append(
                    {
                        "type": "function_call",
                        "call_id": call.get("id", ""),
                        "name": call.get("name", ""),
                        "arguments": call.get("arguments", ""),
                    }
                )
        elif role == "tool":
            payload["input"].append(
                {"type": "function_call_output", "call_id": msg.get("tool_call_id", ""), "output": msg.get("content") or ""}
            )
    if req.tools:
        payload["tools"] = [
            {"type": "function", "name": t["name"], "description": t.get("description", ""), "parameters": t.get("parameters") or {}}
            for t in req.tools
        ]
    if req.tool_choice is not None:
        if isinstance(req.tool_choice, dict):
            payload["tool_choice"] = {"type": "function", "name": req.tool_choice.get("name", "")}
        else:
            payload["tool_choice"] = req.tool_choice
    if req.max_tokens is not None:
        payload["max_output_tokens"] = req.max_tokens
    if req.temperature is not None:
        payload["temperature"] = req.temperature
    if req.top_p is not None:
        payload["top_p"] = req.top_p
    if req.stream_requested_by_harness:
        payload["stream"] = True
    return payload


def emit_response(resp: CanonicalChatResponse) -> Json:
    message = resp.message
    resp_id = f"resp_{short_digest(resp.response_token_ids, message.get('content') or '')}"
    output: list[Json] = []
    content = message.get("content") or ""
    calls = message.get("tool_calls") or []
    if content or not calls:
        output.append(
            {
                "type": "message",
                "id": f"{resp_id}-msg0",
                "role": "assistant",
                "status": "completed",
                "content": [{"type": "output_text", "text": content, "annotations": []}],
            }
        )
    for k, call in enumerate(calls):
        output.append(
            {
                "type": "function_call",
                "id": f"{resp_id}-fc{k}",
                "call_id": call.get("id", ""),
                "name": call.get("name", ""),
                "arguments": call.get("arguments", ""),
                "status": "completed",
            }
        )
    incomplete = resp.finish_reason == "length"
    return {
        "id": resp_id,
        "object": "response",
        "created_at": 0,
        "model": "",
        "status": "incomplete" if incomplete else "completed",
        "incomplete_details": {"reason": "max_output_tokens"} if incomplete else None,
        "output": output,
        "usage": {
            "input_tokens": resp.usage.get("prompt_tokens", 0),
            "output_tokens": resp.usage.get("completion_tokens", 0),
            "total_tokens": resp.usage.get("prompt_tokens", 0) + resp.usage.get("completion_tokens", 0),
        },
    }


def parse_response(doc: Json) -> tuple[Json, str]:
    texts: list[str] = []
    calls: list[Json] = []
    for item in doc.get("output") or []:
        kind = item.get("type")
        if kind == "message":
            texts.append(_item_text(item.get("content")))
        elif kind == "function_call":
            calls.append(tool_call(item.get("call_id", ""), item.get("name", ""), item.get("arguments", "")))
    if doc.get("status") == "incomplete":
        finish = "length"
    elif calls:
        finish = "tool_calls"
    else:
        finish = "stop"
    return assistant_message("".join(texts), calls), finish


def _event(kind: str, data: Json) -> str:
    data = {"type": kind, **data}
    return f"event: {kind}\ndata: " + json.dumps(data, sort_keys=True, ensure_ascii=False)


def emit_stream(resp: CanonicalChatResponse) -> list[str]:
    doc = emit_response(resp)
    events = [
        _event("response.created", {"response": {"id": doc["id"], "object": "response", "status": "in_progress", "output": []}})
    ]
    for output_index, item in enumerate(doc["output"]):
        if item["type"] == "message":
            added = {**item, "content": []}
            events.append(_event("response.output_item.added", {"output_index": output_index, "item": added}))
            full_text = item["content"][0]["text"]
            for piece in chunk_text(full_text):
                events.append(
                    _event(
                        "response.output_text.delta",
                        {"output_index": output_index, "item_id": item["id"], "delta": piece},
                    )
                )
            events.append(
                _event(
                    "response.output_text.done",
                    {"output_index": output_index, "item_id": item["id"], "text": full_text},
                )
            )
        else:
            added = {**item, "arguments": ""}
            events.append(_event("response.output_item.added", {"output_index": output_index, "item": added}))
            for piece in chunk_text(item["arguments"]):
                events.append(
                    _event(
                        "response.function_call_arguments.delta",
                        {"output_index": output_index, "item_id": item["id"], "delta": piece},
                    )
                )
            events.append(
                _event(
                    "response.function_call_arguments.done",
                    {"output_index": output_index, "item_id": item["id"], "arguments": item["arguments"]},
                )
            )
        events.append(_event("response.output_item.done", {"output_index": output_index, "item": item}))
    events.append(_event("response.completed", {"response": doc}))
    return events


def reassemble_stream(events: list[str]) -> tuple[Json, str]:
    items: dict[int, Json] = {}
    status = "completed"
    for event in events:
        data = _event_data(event)
        kind = data.get("type")
        if kind == "response.output_item.added":
            slot = dict(data["item"])
            slot["_text"] = ""
            slot["_args"] = ""
            items[data["output_index"]] = slot
        elif kind == "response.output_text.delta":
            items[data["output_index"]]["_text"] += data["delta"]
        elif kind == "response.function_call_arguments.delta":
            items[data["output_index"]]["_args"] += data["delta"]
        elif kind == "response.completed":
            status = data["response"].get("status", "completed")
    texts: list[str] = []
    calls: list[Json] = []
    for index in sorted(items):
        item = items[index]
        if item.get("type") == "message":
            texts.append(item["_text"])
        else:
            calls.append(tool_call(item.get("call_id", ""), item.get("name", ""), item["_args"]))
    if status == "incomplete":
        finish = "length"
    elif calls:
        finish = "tool_calls"
    else:
        finish = "stop"
    return assistant_message("".join(texts), calls), finish


def _event_data(event: str) -> Json:
    for line in event.splitlines():
        if line.startswith("data:"):
            return json.loads(line[len("data:") :].strip())
    return {}

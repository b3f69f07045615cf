"""Google generateContent dialect.

The wire format has no tool-call ids, so canonical ids are synthesized
deterministically from the function name and its occurrence index; function
responses bind to the oldest unmatched call with the same name. The model
name and the streaming flag live in the request path, not the payload, so
the dispatcher passes them in.
"""

from __future__ import annotations

import json
from collections import defaultdict
from typing import Any, Optional

from ..model import Json
from .canonical import (
    CanonicalChatRequest,
    CanonicalChatResponse,
    MalformedPayloadError,
    assistant_message,
    chunk_text,
    parse_arguments,
    reject_content_kind,
    require,
    text_message,
    tool_call,
    tool_message,
)

_NAME = "google_generate_content"

_FINISH_TO_PROVIDER = {"stop": "STOP", "length": "MAX_TOKENS", "tool_calls": "STOP", "error": "STOP"}


def _synth_id(name: str, occurrence: int) -> str:
    return f"call_{name}_{occurrence}"


class _IdAllocator:
    """Stable id synthesis: nth functionCall of a name <-> nth functionResponse."""

    def __init__(self) -> None:
        self._calls: dict[str, int] = defaultdict(int)
        self._responses: dict[str, int] = defaultdict(int)

    def call_id(self, name: str) -> str:
        self._calls[name] += 1
        return _synth_id(name, self._calls[name])

    def response_id(self, name: str) -> str:
        self._responses[name] += 1
        return _synth_id(name, self._responses[name])


def _system_text(raw: Any) -> str:
    if isinstance(raw, str):
        return raw
    if isinstance(raw, dict):
        return "\n\n".join(p.get("text", "") for p in raw.get("parts") or [])
    return ""


def parse_request(payload: Json, model: str = "", stream: bool = False) -> CanonicalChatRequest:
    messages: list[Json] = []
    system = payload.get("systemInstruction") or payload.get("system_instruction")
    if system is not None:
        messages.append(text_message("system", _system_text(system)))

    ids = _IdAllocator()
    for content in require(payload, "contents", list, _NAME):
        if not isinstance(content, dict):
            raise MalformedPayloadError(f"{_NAME}: contents entries must be objects")
        role = content.get("role", "user")
        if role == "model":
            texts: list[str] = []
            calls: list[Json] = []
            for part in content.get("parts") or []:
                if "text" in part:
                    texts.append(part.get("text", ""))
                elif "functionCall" in part:
                    fc = part["functionCall"]
                    calls.append(tool_call(ids.call_id(fc.get("name", "")), fc.get("name", ""), fc.get("args", {})))
                else:
                    reject_content_kind(_NAME, ",".join(part.keys()))
            messages.append(assistant_message("".join(texts), calls))
        elif role in ("user", "function", "tool"):
            pending: list[str] = []
            for part in content.get("parts") or []:
                if "text" in part:
                    pending.append(part.get("text", ""))
                elif "functionResponse" in part:
                    if pending:
                        messages.append(text_message("user", "".join(pending)))
                        pending = []
                    fr = part["functionResponse"]
                    response = fr.get("response", {})
                    if isinstance(response, dict) and set(response.keys()) == {"output"}:
                        body = response["output"]
                        if not isinstance(body, str):
                            body = json.dumps(body, sort_keys=True, ensure_ascii=False)
                    else:
                        body = json.dumps(response, sort_keys=True, ensure_ascii=False)
                    messages.append(tool_message(ids.response_id(fr.get("name", "")), body))
                else:
                    reject_content_kind(_NAME, ",".join(part.keys()))
            if pending or not (content.get("parts") or []):
                messages.append(text_message("user", "".join(pending)))
        else:
            raise MalformedPayloadError(f"{_NAME}: unknown content role {role!r}")

    tools = None
    declarations: list[Json] = []
    for tool_entry in payload.get("tools") or []:
        declarations.extend(tool_entry.get("functionDeclarations") or tool_entry.get("function_declarations") or [])
    if declarations:
        tools = [
            {"name": d.get("name", ""), "description": d.get("description", ""), "parameters": d.get("parameters") or {}}
            for d in declarations
        ]

    tool_choice = None
    config = (payload.get("toolConfig") or payload.get("tool_config") or {}).get("functionCallingConfig") or (
        payload.get("toolConfig") or payload.get("tool_config") or {}
    ).get("function_calling_config")
    if config:
        mode = (config.get("mode") or "").upper()
        allowed = config.get("allowedFunctionNames") or config.get("allowed_function_names") or []
        if mode == "ANY" and allowed:
            tool_choice = {"name": allowed[0]}
        elif mode == "ANY":
            tool_choice = "required"
        elif mode == "NONE":
            tool_choice = "none"
        elif mode == "AUTO":
            tool_choice = "auto"

    gen = payload.get("generationConfig") or payload.get("generation_config") or {}
    stop = gen.get("stopSequences") or gen.get("stop_sequences")
    return CanonicalChatRequest(
        model=model or payload.get("model", ""),
        messages=messages,
        tools=tools,
        tool_choice=tool_choice,
        stop=list(stop) if stop else None,
        max_tokens=gen.get("maxOutputTokens", gen.get("max_output_tokens")),
        temperature=gen.get("temperature"),
        top_p=gen.get("topP", gen.get("top_p")),
        logprobs_requested=True,
        stream_requested_by_harness=stream,
    )


def _call_args(call: Json) -> Any:
    args = parse_arguments(call.get("arguments", ""))
    if not isinstance(args, (dict, list)):
        args = {"_raw": call.get("arguments", "")}
    return args


def emit_request(req: CanonicalChatRequest) -> Json:
    payload: Json = {"contents": []}
    messages = list(req.messages)
    system_texts = []
    while messages and messages[0].get("role") == "system":
        system_texts.append(messages.pop(0).get("content") or "")
    if system_texts:
        payload["systemInstruction"] = {"parts": [{"text": "\n\n".join(system_texts)}]}

    # tool_call_id -> function name, for functionResponse emission
    call_names: dict[str, str] = {}
    i = 0
    while i < len(messages):
        msg = messages[i]
        role = msg.get("role")
        if role == "assistant":
            parts: list[Json] = []
            if msg.get("content"):
                parts.append({"text": msg["content"]})
            for call in msg.get("tool_calls") or []:
                call_names[call.get("id", "")] = call.get("name", "")
                parts.append({"functionCall": {"name": call.get("name", ""), "args": _call_args(call)}})
            payload["contents"].append({"role": "model", "parts": parts})
            i += 1
        elif role in ("user", "tool"):
            parts = []
            while i < len(messages) and messages[i].get("role") in ("user", "tool"):
                m = messages[i]
                if m.get("role") == "tool":
                    name = call_names.get(m.get("tool_call_id", ""), "function")
                    parts.append({"functionResponse": {"name": name, "response": {"output": m.get("content") or ""}}})
                else:
                    parts.append({"text": m.get("content") or ""})
                i += 1
            payload["contents"].append({"role": "user", "parts": parts})
        else:
            raise MalformedPayloadError(f"{_NAME}: cannot emit non-leading {role!r} message")

    if req.tools:
        payload["tools"] = [
            {
                "functionDeclarations": [
                    {"name": t["name"], "description": t.get("description", ""), "parameters": t.get("parameters") or {}}
                    for t in req.tools
                ]
            }
        ]
    if req.tool_choice is not None:
        if isinstance(req.tool_choice, dict):
            config = {"mode": "ANY", "allowedFunctionNames": [req.tool_choice.get("name", "")]}
        elif req.tool_choice == "required":
            config = {"mode": "ANY"}
        elif req.tool_choice == "none":
            config = {"mode": "NONE"}
        else:
            config = {"mode": "AUTO"}
        payload["toolConfig"] = {"functionCallingConfig": config}

    gen: Json = {}
    if req.stop:
        gen["stopSequences"] = list(req.stop)
    if req.max_tokens is not None:
        gen["maxOutputTokens"] = req.max_tokens
    if req.temperature is not None:
        gen["temperature"] = req.temperature
    if req.top_p is not None:
        gen["topP"] = req.top_p
    if gen:
        payload["generationConfig"] = gen
    return payload


def _response_parts(message: Json) -> list[Json]:
    parts: list[Json] = []
    if message.get("content"):
        parts.append({"text": message["content"]})
    for call in message.get("tool_calls") or []:
        parts.append({"functionCall": {"name": call.get("name", ""), "args": _call_args(call)}})
    return parts


def emit_response(resp: CanonicalChatResponse) -> Json:
    return {
        "candidates": [
            {
                "content": {"role": "model", "parts": _response_parts(resp.message)},
                "finishReason": _FINISH_TO_PROVIDER.get(resp.finish_reason, "STOP"),
                "index": 0,
            }
        ],
        "usageMetadata": {
            "promptTokenCount": resp.usage.get("prompt_tokens", 0),
            "candidatesTokenCount": resp.usage.get("completion_tokens", 0),
            "totalTokenCount": resp.usage.get("prompt_tokens", 0) + resp.usage.get("completion_tokens", 0),
        },
    }


def parse_response(doc: Json) -> tuple[Json, str]:
    candidate = (doc.get("candidates") or [{}])[0]
    texts: list[str] = []
    calls: list[Json] = []
    ids = _IdAllocator()
    for part in (candidate.get("content") or {}).get("parts") or []:
        if "text" in part:
            texts.append(part.get("text", ""))
        elif "functionCall" in part:
            fc = part["functionCall"]
            calls.append(tool_call(ids.call_id(fc.get("name", "")), fc.get("name", ""), fc.get("args", {})))
    reason = candidate.get("finishReason") or "STOP"
    if reason == "MAX_TOKENS":
        finish = "length"
    elif calls:
        finish = "tool_calls"
    else:
        finish = "stop"
    return assistant_message("".join(texts), calls), finish


def _chunk(data: Json) -> str:
    return "data: " + json.dumps(data, sort_keys=True, ensure_ascii=False)


def emit_stream(resp: CanonicalChatResponse) -> list[str]:
    doc = emit_response(resp)
    candidate = doc["candidates"][0]
    events: list[str] = []
    for part in candidate["content"]["parts"]:
        if "text" in part:
            for piece in chunk_text(part["text"]):
                events.append(
                    _chunk({"candidates": [{"content": {"role": "model", "parts": [{"text": piece}]}, "index": 0}]})
                )
        else:
            # Function calls stream as whole parts.
            events.append(_chunk({"candidates": [{"content": {"role": "model", "parts": [part]}, "index": 0}]}))
    events.append(
        _chunk(
            {
                "candidates": [
                    {"content": {"role": "model", "parts": []}, "finishReason": candidate["finishReason"], "index": 0}
                ],
                "usageMetadata": doc["usageMetadata"],
            }
        )
    )
    return events


def reassemble_stream(events: list[str]) -> tuple[Json, str]:
    texts: list[str] = []
    calls: list[Json] = []
    reason: Optional[str] = None
    ids = _IdAllocator()
    for event in events:
        body = event[len("data:") :].strip() if event.startswith("data:") else event
        data = json.loads(body)
        candidate = (data.get("candidates") or [{}])[0]
        for part in (candidate.get("content") or {}).get("parts") or []:
            if "text" in part:
                texts.append(part.get("text", ""))
            elif "functionCall" in part:
                fc = part["functionCall"]
                calls.append(tool_call(ids.call_id(fc.get("name", "")), fc.get("name", ""), fc.get("args", {})))
        if candidate.get("finishReason"):
            reason = candidate["finishReason"]
    if reason == "MAX_TOKENS":
        finish = "length"
    elif calls:
        finish = "tool_calls"
    else:
        finish = "stop"
    return assistant_message("".join(texts), calls), finish

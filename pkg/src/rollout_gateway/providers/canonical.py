"""Canonical chat shapes shared by all provider translators.

Messages and tools are plain dicts so they serialize directly:

    message: {"role": str, "content": str,
              "tool_calls"?: [{"id": str, "name": str, "arguments": str}],
              "tool_call_id"?: str}
    tool:    {"name": str, "description": str, "parameters": dict}

`arguments` is always a JSON string (OpenAI convention); object-valued
provider payloads are dumped with sorted keys so the same call produces the
same canonical bytes regardless of the provider dialect it arrived in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from ..model import Json, LogprobEntry

CANONICAL_ROLES = ("system", "user", "assistant", "tool")


class ProviderError(Exception):
    """Base class for translation failures."""


class UnsupportedProviderError(ProviderError):
    """Request path/headers do not match any supported provider shape."""


class MalformedPayloadError(ProviderError):
    """Provider payload is missing or mistypes a required field."""


class UnsupportedContentError(ProviderError):
    """Content kind outside text + tool (e.g. images); rejected, never dropped."""


def text_message(role: str, content: str) -> Json:
    return {"role": role, "content": content}


def assistant_message(content: str, tool_calls: Optional[list[Json]] = None) -> Json:
    msg: Json = {"role": "assistant", "content": content}
    if tool_calls:
        msg["tool_calls"] = tool_calls
    return msg


def tool_call(call_id: str, name: str, arguments: Any) -> Json:
    if not isinstance(arguments, str):
        arguments = json.dumps(arguments, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return {"id": call_id, "name": name, "arguments": arguments}


def tool_message(tool_call_id: str, content: str) -> Json:
    return {"role": "tool", "tool_call_id": tool_call_id, "content": content}


def parse_arguments(arguments: str) -> Any:
    try:
        return json.loads(arguments)
    except (TypeError, ValueError):
        return arguments


@dataclass(frozen=True)
class CanonicalChatRequest:
    model: str
    messages: list[Json]
    tools: Optional[list[Json]] = None
    tool_choice: Optional[Any] = None
    stop: Optional[list[str]] = None
    max_tokens: Optional[int] = None
    temperature: Optional[float] = None
    top_p: Optional[float] = None
    logprobs_requested: bool = True
    stream_requested_by_harness: bool = False

    def to_dict(self) -> Json:
        return {
            "model": self.model,
            "messages": self.messages,
            "tools": self.tools,
            "tool_choice": self.tool_choice,
            "stop": self.stop,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "logprobs_requested": self.logprobs_requested,
            "stream_requested_by_harness": self.stream_requested_by_harness,
        }

    @classmethod
    def from_dict(cls, d: Json) -> "CanonicalChatRequest":
        return cls(
            model=d.get("model", ""),
            messages=list(d.get("messages") or []),
            tools=d.get("tools"),
            tool_choice=d.get("tool_choice"),
            stop=d.get("stop"),
            max_tokens=d.get("max_tokens"),
            temperature=d.get("temperature"),
            top_p=d.get("top_p"),
            logprobs_requested=bool(d.get("logprobs_requested", True)),
            stream_requested_by_harness=bool(d.get("stream_requested_by_harness", False)),
        )


@dataclass(frozen=True)
class CanonicalChatResponse:
    response_messages: list[Json]
    finish_reason: str
    prompt_token_ids: list[int] = field(default_factory=list)
    response_token_ids: list[int] = field(default_factory=list)
    response_logprobs: list[LogprobEntry] = field(default_factory=list)
    usage: dict[str, int] = field(default_factory=dict)

    @property
    def message(self) -> Json:
        return self.response_messages[0] if self.response_messages else {"role": "assistant", "content": ""}

    def to_dict(self) -> Json:
        return {
            "response_messages": self.response_messages,
            "finish_reason": self.finish_reason,
            "prompt_token_ids": list(self.prompt_token_ids),
            "response_token_ids": list(self.response_token_ids),
            "response_logprobs": [e.to_dict() for e in self.response_logprobs],
            "usage": dict(self.usage),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "CanonicalChatResponse":
        return cls(
            response_messages=list(d.get("response_messages") or []),
            finish_reason=d.get("finish_reason", "stop"),
            prompt_token_ids=list(d.get("prompt_token_ids") or []),
            response_token_ids=list(d.get("response_token_ids") or []),
            response_logprobs=[LogprobEntry.from_dict(e) for e in d.get("response_logprobs") or []],
            usage=dict(d.get("usage") or {}),
        )


def require(payload: Json, field_name: str, kind: type, provider: str) -> Any:
    if field_name not in payload:
        raise MalformedPayloadError(f"{provider}: missing required field {field_name!r}")
    value = payload[field_name]
    if not isinstance(value, kind):
        raise MalformedPayloadError(
            f"{provider}: field {field_name!r} must be {kind.__name__}, got {type(value).__name__}"
        )
    return value


def reject_content_kind(provider: str, kind: str) -> None:
    raise UnsupportedContentError(f"{provider}: unsupported content kind {kind!r} (only text and tool parts)")


def chunk_text(text: str, size: int = 8) -> list[str]:
    """Split text into delta-sized pieces; at least one piece for nonempty text."""
    if not text:
        return []
    return [text[i : i + size] for i in range(0, len(text), size)]


def short_digest(token_ids: list[int], text: str) -> str:
    """Deterministic id suffix so denormalization is a pure function."""
    import hashlib

    h = hashlib.sha1()
    h.update(repr(token_ids).encode())
    h.update(text.encode())
    return h.hexdigest()[:12]

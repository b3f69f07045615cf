"""Provider detection and dispatch over the four supported API dialects.

The proxy calls `detect_provider` on the incoming path/headers, then routes
through `normalize_request` / `denormalize_response` / `synthesize_stream`.
The client-side helpers (`emit_request`, `parse_response`,
`reassemble_stream`, `request_path`, `auth_headers`) let a harness speak any
of the dialects against the proxy; all functions here are pure.
"""

from __future__ import annotations

import re
from typing import Optional

from ..model import Json
from . import anthropic, google, openai_chat, openai_responses
from .canonical import (  # noqa: F401  (re-exported)
    CanonicalChatRequest,
    CanonicalChatResponse,
    MalformedPayloadError,
    ProviderError,
    UnsupportedContentError,
    UnsupportedProviderError,
)

ANTHROPIC_MESSAGES = "anthropic_messages"
OPENAI_CHAT = "openai_chat"
OPENAI_RESPONSES = "openai_responses"
GOOGLE_GENERATE_CONTENT = "google_generate_content"

PROVIDER_KINDS = (ANTHROPIC_MESSAGES, OPENAI_CHAT, OPENAI_RESPONSES, GOOGLE_GENERATE_CONTENT)

_MODULES = {
    ANTHROPIC_MESSAGES: anthropic,
    OPENAI_CHAT: openai_chat,
    OPENAI_RESPONSES: openai_responses,
    GOOGLE_GENERATE_CONTENT: google,
}

_GOOGLE_PATH = re.compile(r"/models/(?P<model>[^/:]+):(?P<verb>generateContent|streamGenerateContent)$")


def detect_provider(request_path: str, headers: Optional[dict[str, str]] = None) -> str:
    """Classify a request by path, falling back to headers to break ambiguity."""
    path = request_path.split("?", 1)[0].rstrip("/")
    if path.endswith("/chat/completions"):
        return OPENAI_CHAT
    if path.endswith("/messages"):
        return ANTHROPIC_MESSAGES
    if path.endswith("/responses"):
        return OPENAI_RESPONSES
    if _GOOGLE_PATH.search(path):
        return GOOGLE_GENERATE_CONTENT
    lowered = {k.lower(): v for k, v in (headers or {}).items()}
    if "anthropic-version" in lowered:
        return ANTHROPIC_MESSAGES
    raise UnsupportedProviderError(f"unsupported provider path {request_path!r}")


def google_path_info(request_path: str) -> tuple[str, bool]:
    """(model, stream_requested) extracted from a generateContent-style path."""
    match = _GOOGLE_PATH.search(request_path.split("?", 1)[0].rstrip("/"))
    if not match:
        return "", False
    return match.group("model"), match.group("verb") == "streamGenerateContent"


def normalize_request(kind: str, payload: Json, *, path_model: str = "", path_stream: bool = False) -> CanonicalChatRequest:
    if kind == GOOGLE_GENERATE_CONTENT:
        return google.parse_request(payload, model=path_model, stream=path_stream)
    return _MODULES[kind].parse_request(payload)


def denormalize_response(kind: str, resp: CanonicalChatResponse) -> Json:
    return _MODULES[kind].emit_response(resp)


def synthesize_stream(kind: str, resp: CanonicalChatResponse) -> list[str]:
    return _MODULES[kind].emit_stream(resp)


def emit_request(kind: str, req: CanonicalChatRequest) -> Json:
    return _MODULES[kind].emit_request(req)


def parse_response(kind: str, doc: Json) -> tuple[Json, str]:
    return _MODULES[kind].parse_response(doc)


def reassemble_stream(kind: str, events: list[str]) -> tuple[Json, str]:
    return _MODULES[kind].reassemble_stream(events)


def request_path(kind: str, model: str, stream: bool = False) -> str:
    """The path a native client of this dialect would POST to."""
    if kind == ANTHROPIC_MESSAGES:
        return "/v1/messages"
    if kind == OPENAI_CHAT:
        return "/v1/chat/completions"
    if kind == OPENAI_RESPONSES:
        return "/v1/responses"
    verb = "streamGenerateContent" if stream else "generateContent"
    suffix = "?alt=sse" if stream else ""
    return f"/v1beta/models/{model}:{verb}{suffix}"


def auth_headers(kind: str, token: str) -> dict[str, str]:
    """Headers a native client uses to pass its API key."""
    if kind == ANTHROPIC_MESSAGES:
        return {"x-api-key": token, "anthropic-version": "2023-06-01"}
    if kind == GOOGLE_GENERATE_CONTENT:
        return {"x-goog-api-key": token}
    return {"Authorization": f"Bearer {token}"}


def extract_token(headers: dict[str, str], query: dict[str, str]) -> Optional[str]:
    """Pull the session token out of whichever auth slot the dialect used."""
    lowered = {k.lower(): v for k, v in headers.items()}
    auth = lowered.get("authorization", "")
    if auth.lower().startswith("bearer "):
        return auth[7:].strip()
    for header in ("x-api-key", "x-goog-api-key", "api-key"):
        if lowered.get(header):
            return lowered[header]
    if query.get("key"):
        return query["key"]
    return None


def sse_body(events: list[str]) -> str:
    """Join event blocks into a complete text/event-stream body."""
    return "".join(e + "\n\n" for e in events)


def split_sse(body: str) -> list[str]:
    """Split a text/event-stream body back into event blocks."""
    return [block for block in (b.strip("\n") for b in body.split("\n\n")) if block.strip()]


def stream_requested(kind: str, payload: Json, request_path_str: str = "") -> bool:
    if kind == GOOGLE_GENERATE_CONTENT:
        return google_path_info(request_path_str)[1]
    return bool(payload.get("stream", False))

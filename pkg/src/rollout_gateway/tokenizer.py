"""Canonical byte-level tokenizer backing the deterministic mock backend.

The vocabulary is the 256 byte values plus a handful of structural specials.
Rendering a message list is append-only by construction: rendering
`messages + [m]` always extends the rendering of `messages` as a strict
token prefix, which is exactly the property prefix merging relies on.
Keeping tokens at byte granularity makes every merge example hand-checkable.
"""

from __future__ import annotations

import json
from typing import Any, Iterable

EOT = 256  # end of turn; closes every rendered message (the merge cut point)
BOM = 257  # beginning of message
SYS = 258
USR = 259
AST = 260
TOOL = 261

END_OF_TURN_TOKEN_ID = EOT
VOCAB_SIZE = 262

ROLE_TOKENS = {"system": SYS, "user": USR, "assistant": AST, "tool": TOOL}
_SPECIAL_NAMES = {EOT: "<eot>", BOM: "<bom>", SYS: "<sys>", USR: "<usr>", AST: "<ast>", TOOL: "<tool>"}

# Separators inside the canonical serialization of tool calls. Control bytes
# keep the rendering injective against ordinary message text.
_CALL_SEP = "\x1f"
_ARG_SEP = "\x1e"


def canonical_arguments(arguments: Any) -> str:
    """Canonical string form of tool-call arguments (stable across providers)."""
    if isinstance(arguments, str):
        return arguments
    return json.dumps(arguments, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def message_body_text(message: dict[str, Any]) -> str:
    """The canonical text whose UTF-8 bytes are the message body tokens.

    Tool-call ids are deliberately excluded: they differ across provider
    protocols while the captured token stream must not.
    """
    parts = [str(message.get("content") or "")]
    for call in message.get("tool_calls") or []:
        parts.append(f"{_CALL_SEP}{call.get('name', '')}{_ARG_SEP}{canonical_arguments(call.get('arguments', ''))}")
    return "".join(parts)


def message_body_tokens(message: dict[str, Any]) -> list[int]:
    return list(message_body_text(message).encode("utf-8"))


def render_message(message: dict[str, Any]) -> list[int]:
    role = message.get("role", "user")
    role_token = ROLE_TOKENS.get(role)
    if role_token is None:
        raise ValueError(f"cannot render message with role {role!r}")
    return [BOM, role_token] + message_body_tokens(message) + [EOT]


def render(messages: Iterable[dict[str, Any]]) -> list[int]:
    """Render a conversation into prompt tokens, ending with the generation header."""
    tokens: list[int] = []
    for message in messages:
        tokens.extend(render_message(message))
    tokens.extend([BOM, AST])
    return tokens


def decode_token(token_id: int) -> str:
    if token_id in _SPECIAL_NAMES:
        return _SPECIAL_NAMES[token_id]
    if 0 <= token_id <= 255:
        return bytes([token_id]).decode("utf-8", errors="replace")
    return f"<unk:{token_id}>"


def decode(token_ids: Iterable[int]) -> str:
    """Human-readable rendering of a token sequence (byte runs decoded as UTF-8)."""
    out: list[str] = []
    run: list[int] = []
    for t in token_ids:
        if 0 <= t <= 255:
            run.append(t)
        else:
            if run:
                out.append(bytes(run).decode("utf-8", errors="replace"))
                run = []
            out.append(_SPECIAL_NAMES.get(t, f"<unk:{t}>"))
    if run:
        out.append(bytes(run).decode("utf-8", errors="replace"))
    return "".join(out)

"""The gateway-hosted model endpoint: session-bound capture of model traffic.

Each admitted session gets a per-session base URL and a bearer token; the
harness treats them as its normal provider endpoint and API key. Incoming
requests are classified by provider dialect, normalized, forwarded to the
inference backend, recorded as CompletionRecords (seq assigned at response
completion under the session lock), and answered in the provider's shape -
streamed synthetically when the harness asked for streaming. Token-level
fields never reach the harness; they stay in the capture path, copied
verbatim from the backend with no retokenization anywhere.
"""

from __future__ import annotations

import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from . import providers
from .httpd import Response, json_error
from .mock_llm import parse_upstream_response, upstream_request_doc
from .model import CompletionRecord, CompletionSession, SessionSpec
from .providers.canonical import (
    MalformedPayloadError,
    UnsupportedContentError,
    UnsupportedProviderError,
)

log = logging.getLogger(__name__)


class DuplicateSessionError(Exception):
    pass


class UnknownSessionError(Exception):
    pass


@dataclass
class SessionRegistryEntry:
    session_id: str
    session_token: str
    inference_endpoint: str
    deadline: Optional[float] = None
    next_seq: int = 0
    completions: list[CompletionRecord] = field(default_factory=list)
    open: bool = True
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class SessionRegistry:
    """Session-scoped completion capture; append is linearizable per session."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, SessionRegistryEntry] = {}
        self._tokens: dict[str, str] = {}

    def issue_credentials(
        self,
        session: SessionSpec,
        gateway_base_url: str,
        inference_endpoint: str,
    ) -> tuple[str, str]:
        """Register the session and mint its proxy coordinates.

        Either the URL path segment or the token identifies the session alone;
        the token is authoritative because some harnesses normalize base URLs.
        """
        token = secrets.token_hex(16)
        with self._lock:
            existing = self._entries.get(session.session_id)
            if existing is not None and existing.open:
                raise DuplicateSessionError(f"session {session.session_id!r} is already live")
            if existing is not None:
                self._tokens.pop(existing.session_token, None)
            entry = SessionRegistryEntry(
                session_id=session.session_id,
                session_token=token,
                inference_endpoint=inference_endpoint,
                deadline=session.deadline,
            )
            self._entries[session.session_id] = entry
            self._tokens[token] = session.session_id
        return f"{gateway_base_url}/proxy/{session.session_id}", token

    def _resolve(self, token: Optional[str], session_id: Optional[str]) -> Optional[SessionRegistryEntry]:
        with self._lock:
            if token and token in self._tokens:
                return self._entries.get(self._tokens[token])
            if session_id:
                return self._entries.get(session_id)
        return None

    def get(self, session_id: str) -> Optional[SessionRegistryEntry]:
        with self._lock:
            return self._entries.get(session_id)

    def close_session(self, session_id: str) -> None:
        entry = self.get(session_id)
        if entry is not None:
            with entry.lock:
                entry.open = False

    def delete_session(self, session_id: str) -> None:
        with self._lock:
            entry = self._entries.pop(session_id, None)
            if entry is not None:
                self._tokens.pop(entry.session_token, None)

    def completion_count(self, session_id: str) -> int:
        entry = self.get(session_id)
        if entry is None:
            return 0
        with entry.lock:
            return len(entry.completions)

    def snapshot_session(self, session_id: str) -> CompletionSession:
        """Consistent point-in-time copy, stable under concurrent captures."""
        entry = self.get(session_id)
        if entry is None:
            raise UnknownSessionError(session_id)
        with entry.lock:
            return CompletionSession(session_id=session_id, completions=list(entry.completions))

    # -- the four capture steps ----------------------------------------------

    def handle_model_request(
        self,
        path_session_id: Optional[str],
        subpath: str,
        headers: dict[str, str],
        query: dict[str, str],
        payload: dict,
    ) -> Response:
        token = providers.extract_token(headers, query)
        entry = self._resolve(token, path_session_id)
        if entry is None:
            return json_error(401, f"unknown session (path={path_session_id!r})")
        if not entry.open:
            return json_error(409, f"session {entry.session_id!r} is closed")

        try:
            kind = providers.detect_provider(subpath, headers)
        except UnsupportedProviderError as exc:
            return json_error(404, str(exc))

        path_model, path_stream = providers.google_path_info(subpath)
        try:
            canonical = providers.normalize_request(kind, payload, path_model=path_model, path_stream=path_stream)
        except UnsupportedContentError as exc:
            return json_error(415, str(exc))
        except MalformedPayloadError as exc:
            return json_error(400, str(exc))

        timeout = 60.0
        if entry.deadline is not None:
            timeout = max(5.0, entry.deadline - time.time() + 5.0)
        try:
            upstream = requests.post(
                entry.inference_endpoint.rstrip("/") + "/v1/chat/completions",
                json=upstream_request_doc(canonical, entry.session_id),
                timeout=timeout,
            )
        except requests.RequestException as exc:
            return json_error(502, f"upstream failure: {exc}")
        if upstream.status_code != 200:
            return json_error(502, f"upstream failure: status {upstream.status_code}: {upstream.text[:300]}")

        resp = parse_upstream_response(upstream.json())

        with entry.lock:
            if not entry.open:
                return json_error(409, f"session {entry.session_id!r} is closed")
            record = CompletionRecord(
                seq=entry.next_seq,
                provider=kind,
                request_messages=list(canonical.messages),
                response_messages=list(resp.response_messages),
                tools=canonical.tools,
                prompt_token_ids=list(resp.prompt_token_ids),
                response_token_ids=list(resp.response_token_ids),
                response_logprobs=list(resp.response_logprobs),
                finish_reason=resp.finish_reason,
                captured_at=time.time(),
            )
            entry.next_seq += 1
            entry.completions.append(record)

        if canonical.stream_requested_by_harness:
            return Response(sse_events=providers.synthesize_stream(kind, resp))
        return Response(payload=providers.denormalize_response(kind, resp))

"""Thread-based HTTP plumbing shared by the rollout server, gateways, and mocks.

A tiny router over ThreadingHTTPServer keeps every service on one concurrency
model (threads all the way down) and gives tests deterministic start/stop.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import parse_qsl, urlsplit

import requests

log = logging.getLogger(__name__)


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes

    def json(self) -> Any:
        if not self.body:
            return {}
        return json.loads(self.body.decode("utf-8"))


@dataclass
class Response:
    status: int = 200
    payload: Any = None  # JSON-encodable
    sse_events: Optional[list[str]] = None
    content_type: str = "application/json"
    raw: Optional[bytes] = None
    headers: dict[str, str] = field(default_factory=dict)


def json_error(status: int, message: str, **extra: Any) -> Response:
    return Response(status=status, payload={"error": message, **extra})


Handler = Callable[..., Response]


class Router:
    def __init__(self) -> None:
        self._routes: list[tuple[Optional[str], re.Pattern[str], Handler]] = []

    def add(self, method: Optional[str], pattern: str, handler: Handler) -> None:
        """Register a handler; `None` method matches anything (catch-all proxies)."""
        self._routes.append((method, re.compile(pattern), handler))

    def dispatch(self, request: Request) -> Response:
        for method, pattern, handler in self._routes:
            if method is not None and method != request.method:
                continue
            match = pattern.fullmatch(request.path)
            if match:
                return handler(request, **match.groupdict())
        return json_error(404, f"no route for {request.method} {request.path}")


class _HttpHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    router: Router  # set on the subclass created per service

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        log.debug("%s - %s", self.address_string(), format % args)

    def _handle(self) -> None:
        parts = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        request = Request(
            method=self.command,
            path=parts.path,
            query=dict(parse_qsl(parts.query)),
            headers={k: v for k, v in self.headers.items()},
            body=body,
        )
        try:
            response = self.router.dispatch(request)
        except json.JSONDecodeError as exc:
            response = json_error(400, f"invalid JSON body: {exc}")
        except Exception as exc:  # noqa: BLE001 - service must answer something
            log.exception("handler error on %s %s", request.method, request.path)
            response = json_error(500, f"internal error: {exc}")
        try:
            self._write(response)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away (e.g. harness killed mid-stream)

    def _write(self, response: Response) -> None:
        if response.sse_events is not None:
            body = "".join(e + "\n\n" for e in response.sse_events).encode("utf-8")
            self.send_response(response.status)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            for key, value in response.headers.items():
                self.send_header(key, value)
            self.end_headers()
            self.wfile.write(body)
            self.close_connection = True
            return
        if response.raw is not None:
            body = response.raw
        else:
            body = json.dumps(response.payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        self.send_response(response.status)
        self.send_header("Content-Type", response.content_type)
        self.send_header("Content-Length", str(len(body)))
        for key, value in response.headers.items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    do_GET = _handle
    do_POST = _handle
    do_PUT = _handle
    do_DELETE = _handle
    do_PATCH = _handle


class HttpService:
    """A routed HTTP server running on a daemon thread."""

    def __init__(self, router: Router, host: str = "127.0.0.1", port: int = 0, name: str = "http") -> None:
        handler = type(f"_{name}Handler", (_HttpHandler,), {"router": router})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None
        self.name = name

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "HttpService":
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"{self.name}-serve", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def post_json(url: str, payload: Any, headers: Optional[dict[str, str]] = None, timeout: float = 30.0) -> requests.Response:
    return requests.post(url, json=payload, headers=headers or {}, timeout=timeout)


def get_json(url: str, timeout: float = 30.0) -> requests.Response:
    return requests.get(url, timeout=timeout)


def post_with_retries(
    url: str,
    payload: Any,
    attempts: int = 8,
    base_delay: float = 0.2,
    timeout: float = 30.0,
) -> Optional[requests.Response]:
    """At-least-once delivery helper: bounded retries with linear backoff."""
    last: Optional[requests.Response] = None
    for attempt in range(attempts):
        try:
            last = post_json(url, payload, timeout=timeout)
            if last.status_code < 500:
                return last
        except requests.RequestException:
            last = None
        time.sleep(base_delay * (attempt + 1))
    return last


def wait_until(predicate: Callable[[], bool], timeout: float, interval: float = 0.05) -> bool:
    """Poll until predicate() or timeout; returns the final predicate value."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()

"""Scripted black-box agent used as the test harness.

Reads a script, talks to the proxy over a real provider protocol (streamed or
not), performs tool-like workspace actions, and exercises the session shapes
that matter for trajectory reconstruction: linear turns, history compaction,
and nested subagents. Runs as a standalone executable configured through
MODEL_BASE_URL / MODEL_API_KEY / MODEL_NAME, so the gateway sees a true black
box.

Script schema (JSON):

    {
      "system": "agent system prompt",
      "max_tokens": 512,
      "steps": [
        {"type": "call", "message": "next user message", "stream": false},
        {"type": "tool_result", "content": "tool output"},
        {"type": "compact", "replacement": "condensed history"},
        {"type": "subagent", "system": "sub prompt", "steps": [...], "concurrent": false},
        {"type": "exec_tool", "command": "touch marker"},
        {"type": "sleep", "seconds": 2},
        {"type": "exit", "code": 0}
      ]
    }
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import threading
import time
from typing import Optional

import requests

from . import providers
from .model import Json
from .providers.canonical import CanonicalChatRequest, text_message, tool_message

log = logging.getLogger(__name__)


class HarnessFailure(Exception):
    pass


class ScriptClient:
    def __init__(self, base_url: str, token: str, model: str, provider: str, stream_default: bool = False) -> None:
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.model = model
        self.provider = provider
        self.stream_default = stream_default

    def call_model(self, messages: list[Json], extra: Json, stream: bool) -> tuple[Json, str]:
        request = CanonicalChatRequest(
            model=self.model,
            messages=list(messages),
            tools=extra.get("tools"),
            max_tokens=extra.get("max_tokens"),
            temperature=extra.get("temperature"),
            stream_requested_by_harness=stream,
        )
        payload = providers.emit_request(self.provider, request)
        url = self.base_url + providers.request_path(self.provider, self.model, stream)
        headers = providers.auth_headers(self.provider, self.token)
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=600)
        except requests.RequestException as exc:
            raise HarnessFailure(f"proxy unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise HarnessFailure(f"model call failed: {resp.status_code} {resp.text[:300]}")
        if stream:
            events = providers.split_sse(resp.text)
            return providers.reassemble_stream(self.provider, events)
        return providers.parse_response(self.provider, resp.json())


def run_steps(client: ScriptClient, script: Json, history: list[Json]) -> int:
    """Execute script steps against one conversation history. Returns exit code."""
    subagent_threads: list[threading.Thread] = []
    failures: list[BaseException] = []
    try:
        for step in script.get("steps") or []:
            kind = step.get("type")
            if kind == "call":
                if step.get("message") is not None:
                    history.append(text_message("user", str(step["message"])))
                stream = bool(step.get("stream", client.stream_default))
                message, finish = client.call_model(history, script, stream)
                history.append(message)
                log.debug("assistant reply (%s): %r", finish, message.get("content"))
            elif kind == "tool_result":
                last = history[-1] if history else {}
                for call in last.get("tool_calls") or []:
                    history.append(tool_message(call.get("id", ""), str(step.get("content", ""))))
            elif kind == "compact":
                # Harness-side history rewrite; deliberately breaks the prefix relation.
                system = [m for m in history if m.get("role") == "system"][:1]
                history[:] = system + [text_message("user", str(step.get("replacement", "")))]
            elif kind == "subagent":
                sub_history: list[Json] = []
                if step.get("system"):
                    sub_history.append(text_message("system", str(step["system"])))
                sub_script = {"steps": step.get("steps") or [], **{k: script[k] for k in ("max_tokens",) if k in script}}
                if step.get("concurrent"):
                    def _run(s=sub_script, h=sub_history):
                        try:
                            run_steps(client, s, h)
                        except BaseException as exc:  # noqa: BLE001
                            failures.append(exc)

                    thread = threading.Thread(target=_run, daemon=True)
                    thread.start()
                    subagent_threads.append(thread)
                else:
                    code = run_steps(client, sub_script, sub_history)
                    if code != 0:
                        return code
            elif kind == "exec_tool":
                proc = subprocess.run(step.get("command", ""), shell=True, capture_output=True)
                log.debug("exec_tool %r -> %d", step.get("command"), proc.returncode)
            elif kind == "sleep":
                time.sleep(float(step.get("seconds", 0)))
            elif kind == "exit":
                return int(step.get("code", 0))
            else:
                raise HarnessFailure(f"unknown step type {kind!r}")
    finally:
        for thread in subagent_threads:
            thread.join(timeout=600)
    if failures:
        raise HarnessFailure(f"subagent failed: {failures[0]}")
    return 0


def run_script(
    script: Json,
    base_url: str,
    token: str,
    model: str,
    provider: str,
    stream: bool = False,
) -> int:
    client = ScriptClient(base_url, token, model, provider, stream_default=stream)
    history: list[Json] = []
    if script.get("system"):
        history.append(text_message("system", str(script["system"])))
    try:
        return run_steps(client, script, history)
    except HarnessFailure as exc:
        print(f"harness failure: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="scripted black-box agent harness")
    parser.add_argument("--script", required=True, help="path to the script JSON file")
    parser.add_argument("--provider", default="openai_chat", choices=providers.PROVIDER_KINDS)
    parser.add_argument("--stream", action="store_true", help="request streaming responses by default")
    parser.add_argument("--base-url", default=os.environ.get("MODEL_BASE_URL", ""))
    parser.add_argument("--api-key", default=os.environ.get("MODEL_API_KEY", ""))
    parser.add_argument("--model", default=os.environ.get("MODEL_NAME", "default-model"))
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if not args.base_url:
        print("MODEL_BASE_URL is not set", file=sys.stderr)
        return 2
    with open(args.script, encoding="utf-8") as fh:
        script = json.load(fh)
    provider = script.get("provider", args.provider)
    return run_script(script, args.base_url, args.api_key, args.model, provider, stream=args.stream)


if __name__ == "__main__":
    sys.exit(main())

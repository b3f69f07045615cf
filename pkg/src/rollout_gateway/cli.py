"""Operator entry points: serve the three processes, submit and inspect work.

Every command is non-interactive and exit-code honest (0 iff success), so the
whole surface is scriptable from CI. Output defaults to human-readable
tables; pass --json for machine consumption. Server flags fall back to
environment variables (ROLLOUT_* for the rollout server, GATEWAY_* for
gateway nodes, MOCK_LLM_* for the mock backend).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from typing import Any, Optional

import requests

from . import tokenizer
from .export import export_sft_dataset, train_test_split
from .gateway import GatewayConfig, GatewayNode
from .mock_llm import MockLlmService, Scenario
from .model import SessionResult, Trace
from .server import RolloutServer, ServerConfig

log = logging.getLogger(__name__)


def _split_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def _serve_forever(stop_fn) -> int:
    stop_event = threading.Event()

    def _on_signal(signum, frame):  # noqa: ARG001
        stop_event.set()

    signal.signal(signal.SIGINT, _on_signal)
    signal.signal(signal.SIGTERM, _on_signal)
    try:
        while not stop_event.is_set():
            time.sleep(0.2)
    finally:
        stop_fn()
    return 0


def cmd_serve_rollout(args: argparse.Namespace) -> int:
    host, port = _split_listen(args.listen)
    config = ServerConfig(
        journal_path=args.journal,
        host=host,
        port=port,
        max_retries=args.max_retries,
        heartbeat_interval=args.heartbeat_interval,
        schedule_interval=args.schedule_interval,
    )
    try:
        server = RolloutServer(config).start()
    except OSError as exc:
        print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
        return 2
    print(f"rollout server on {server.url} journal={args.journal}", flush=True)
    return _serve_forever(server.stop)


def cmd_serve_gateway(args: argparse.Namespace) -> int:
    host, port = _split_listen(args.listen)
    config = GatewayConfig(
        inference_url=args.inference_url,
        rollout_url=args.rollout_url or None,
        host=host,
        port=port,
        node_id=args.node_id or "",
        advertise_url=args.advertise_url or None,
        init_pool=args.init_pool,
        running_pool=args.running_pool,
        postrun_pool=args.postrun_pool,
        ready_bound=args.ready_bound,
        heartbeat_interval=args.heartbeat_interval,
        postrun_budget=args.postrun_budget,
    )
    try:
        node = GatewayNode(config).start()
    except OSError as exc:
        print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
        return 2
    print(f"gateway {config.node_id} on {node.url} -> inference {args.inference_url}", flush=True)
    return _serve_forever(node.stop)


def cmd_serve_mock_llm(args: argparse.Namespace) -> int:
    host, port = _split_listen(args.listen)
    scenario = Scenario.load(args.scenario) if args.scenario else None
    try:
        service = MockLlmService(scenario, host=host, port=port).start()
    except OSError as exc:
        print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
        return 2
    print(f"mock llm on {service.url}", flush=True)
    return _serve_forever(service.stop)


def cmd_submit(args: argparse.Namespace) -> int:
    with open(args.file, encoding="utf-8") as fh:
        payload = json.load(fh)
    resp = requests.post(args.server.rstrip("/") + "/rollout/task/submit", json=payload, timeout=30)
    doc = resp.json()
    if resp.status_code != 200:
        print(json.dumps(doc, indent=2) if args.json else f"submit failed: {doc.get('error')}", file=sys.stderr)
        for violation in doc.get("violations") or []:
            print(f"  - {violation}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(doc["task_id"])
    return 0


def _fetch_task(server: str, task_id: str) -> Optional[dict[str, Any]]:
    resp = requests.get(f"{server.rstrip('/')}/rollout/task/{task_id}", timeout=30)
    if resp.status_code != 200:
        return None
    return resp.json()


def cmd_status(args: argparse.Namespace) -> int:
    doc = _fetch_task(args.server, args.task_id)
    if doc is None:
        print(f"unknown task {args.task_id}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"task {doc['task_id']}: {doc['status']} ({len(doc['results'])}/{doc['num_samples']} terminal)")
    header = f"{'session':<52} {'state':<10} {'status':<18} {'reward':<8} retries"
    print(header)
    print("-" * len(header))
    for sid, session in doc["sessions"].items():
        result = doc["results"].get(sid) or {}
        reward = (result.get("evaluator_report") or {}).get("reward")
        print(
            f"{sid:<52} {session['state']:<10} {result.get('status', '-'):<18} "
            f"{reward if reward is not None else '-':<8} {session['retries_used']}"
        )
    return 0


def _find_session(server: str, session_id: str, task_id: Optional[str]) -> Optional[dict[str, Any]]:
    task_ids = [task_id] if task_id else None
    if task_ids is None:
        status = requests.get(server.rstrip("/") + "/rollout/status", timeout=30).json()
        task_ids = list(status.get("tasks") or {})
    for tid in task_ids:
        doc = _fetch_task(server, tid)
        if doc and session_id in (doc.get("results") or {}):
            return doc["results"][session_id]
    return None


def _render_mask_line(trace: Trace) -> str:
    pieces = []
    for token_id, mask in zip(trace.response_ids, trace.loss_mask):
        text = tokenizer.decode_token(token_id) if token_id < tokenizer.VOCAB_SIZE else str(token_id)
        text = text.replace("\n", "\\n")
        pieces.append(f"[{text}]" if mask == 1 else f" {text} ")
    return "".join(pieces)


def cmd_traces(args: argparse.Namespace) -> int:
    result_doc = _find_session(args.server, args.session_id, args.task)
    if result_doc is None:
        print(f"no terminal result found for session {args.session_id}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(result_doc, indent=2, sort_keys=True))
        return 0
    result = SessionResult.from_dict(result_doc)
    print(f"session {result.session_id} status={result.status} reward={result.evaluator_report.get('reward')}")
    if result.trajectory is None:
        print("(no trajectory)")
        return 0
    diag = result.trajectory.build_diagnostics
    print(f"builder={result.trajectory.builder_name} traces={len(result.trajectory.traces)} diagnostics={diag}")
    for i, trace in enumerate(result.trajectory.traces):
        trainable = sum(trace.loss_mask)
        print(f"\ntrace {i}: prompt={len(trace.prompt_ids)} tok, response={len(trace.response_ids)} tok, trainable={trainable}")
        print(f"  finish={trace.finish_reason} reward={trace.reward} chain={trace.metadata.get('chain_index')}")
        print("  " + _render_mask_line(trace))
    return 0


def _load_results(args: argparse.Namespace) -> list[SessionResult]:
    results: list[SessionResult] = []
    for path in args.results or []:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    results.append(SessionResult.from_dict(json.loads(line)))
    if args.server:
        for task_id in args.task or []:
            doc = _fetch_task(args.server, task_id)
            if doc is None:
                raise SystemExit(f"unknown task {task_id}")
            for result_doc in (doc.get("results") or {}).values():
                results.append(SessionResult.from_dict(result_doc))
    return results


def cmd_export(args: argparse.Namespace) -> int:
    results = _load_results(args)
    if not results:
        print("no session results to export", file=sys.stderr)
        return 1
    summary = export_sft_dataset(
        results,
        output_path=args.output,
        rejected_path=args.rejected,
        summary_path=args.summary,
        stratify_key=args.stratify_key,
    )
    if args.split is not None:
        rows = []
        with open(args.output, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        train, test = train_test_split(rows, test_fraction=args.split, stratify_key=args.stratify_key, seed=args.seed)
        base = args.output.rsplit(".", 1)[0]
        for name, subset in (("train", train), ("test", test)):
            with open(f"{base}.{name}.jsonl", "w", encoding="utf-8") as fh:
                for row in subset:
                    fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        print(f"split: {len(train)} train / {len(test)} test")
    print(
        f"exported {summary.accepted}/{summary.attempts} rows "
        f"({100 * summary.acceptance_rate:.1f}% acceptance) -> {args.output}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rollout-gateway", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-rollout", help="run the rollout server")
    p.add_argument("--listen", default=os.environ.get("ROLLOUT_LISTEN", "127.0.0.1:8700"))
    p.add_argument("--journal", default=os.environ.get("ROLLOUT_JOURNAL", "rollout-journal.jsonl"))
    p.add_argument("--max-retries", type=int, default=int(os.environ.get("ROLLOUT_MAX_RETRIES", "1")))
    p.add_argument("--heartbeat-interval", type=float, default=float(os.environ.get("ROLLOUT_HEARTBEAT_INTERVAL", "1.0")))
    p.add_argument("--schedule-interval", type=float, default=float(os.environ.get("ROLLOUT_SCHEDULE_INTERVAL", "0.2")))
    p.set_defaults(fn=cmd_serve_rollout)

    p = sub.add_parser("serve-gateway", help="run a gateway node")
    p.add_argument("--listen", default=os.environ.get("GATEWAY_LISTEN", "127.0.0.1:8800"))
    p.add_argument("--rollout-url", default=os.environ.get("GATEWAY_ROLLOUT_URL", ""))
    p.add_argument("--inference-url", default=os.environ.get("GATEWAY_INFERENCE_URL", "http://127.0.0.1:8900"))
    p.add_argument("--node-id", default=os.environ.get("GATEWAY_NODE_ID", ""))
    p.add_argument("--advertise-url", default=os.environ.get("GATEWAY_ADVERTISE_URL", ""))
    p.add_argument("--init-pool", type=int, default=int(os.environ.get("GATEWAY_INIT_POOL", "2")))
    p.add_argument("--running-pool", type=int, default=int(os.environ.get("GATEWAY_RUNNING_POOL", "2")))
    p.add_argument("--postrun-pool", type=int, default=int(os.environ.get("GATEWAY_POSTRUN_POOL", "2")))
    p.add_argument("--ready-bound", type=int, default=int(os.environ.get("GATEWAY_READY_BOUND", "4")))
    p.add_argument("--heartbeat-interval", type=float, default=float(os.environ.get("GATEWAY_HEARTBEAT_INTERVAL", "1.0")))
    p.add_argument("--postrun-budget", type=float, default=float(os.environ.get("GATEWAY_POSTRUN_BUDGET", "120")))
    p.set_defaults(fn=cmd_serve_gateway)

    p = sub.add_parser("serve-mock-llm", help="run the deterministic mock inference backend")
    p.add_argument("--listen", default=os.environ.get("MOCK_LLM_LISTEN", "127.0.0.1:8900"))
    p.add_argument("--scenario", default=os.environ.get("MOCK_LLM_SCENARIO", ""))
    p.set_defaults(fn=cmd_serve_mock_llm)

    p = sub.add_parser("submit", help="submit a task request file")
    p.add_argument("file")
    p.add_argument("--server", default=os.environ.get("ROLLOUT_SERVER_URL", "http://127.0.0.1:8700"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("status", help="poll a task")
    p.add_argument("task_id")
    p.add_argument("--server", default=os.environ.get("ROLLOUT_SERVER_URL", "http://127.0.0.1:8700"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("traces", help="pretty-print a session's traces with mask visualization")
    p.add_argument("session_id")
    p.add_argument("--task", default=None, help="task id (skips the scan over all tasks)")
    p.add_argument("--server", default=os.environ.get("ROLLOUT_SERVER_URL", "http://127.0.0.1:8700"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_traces)

    p = sub.add_parser("export", help="export accepted sessions as an SFT JSONL dataset")
    p.add_argument("--server", default=os.environ.get("ROLLOUT_SERVER_URL", ""))
    p.add_argument("--task", action="append", help="task id to export (repeatable)")
    p.add_argument("--results", action="append", help="JSONL file of SessionResult documents (repeatable)")
    p.add_argument("--output", required=True)
    p.add_argument("--rejected", default=None, help="companion file for rejected sessions")
    p.add_argument("--summary", default=None, help="acceptance summary JSON path")
    p.add_argument("--stratify-key", default="repo")
    p.add_argument("--split", type=float, default=None, help="test fraction for a stratified train/test split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("ROLLOUT_GATEWAY_LOG", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except requests.RequestException as exc:
        print(f"request failed: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

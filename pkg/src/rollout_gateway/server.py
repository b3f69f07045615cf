"""Rollout server: durable task intake, scheduling, persistence, callbacks.

Tasks are expanded into sessions and dispatched to registered gateway nodes,
least-loaded first. State that must survive a crash - task submissions,
terminal session results, requeue decisions, and delivered task callbacks -
is recorded in an append-only JSON-lines journal and replayed at startup;
everything else (assignments, node liveness) is rebuilt from heartbeats.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from .httpd import HttpService, Request, Response, Router, json_error, post_with_retries
from .model import (
    Json,
    NodeInfo,
    SessionResult,
    SessionSpec,
    TaskRequest,
    dumps_canonical,
    expand_task,
    validate_task,
)

log = logging.getLogger(__name__)

STALE_HEARTBEATS = 3  # a node missing this many intervals is quarantined


@dataclass
class ServerConfig:
    journal_path: str
    host: str = "127.0.0.1"
    port: int = 0
    max_retries: int = 1
    heartbeat_interval: float = 1.0
    schedule_interval: float = 0.2
    callback_attempts: int = 10


@dataclass
class _SessionTracking:
    spec: SessionSpec
    state: str = "pending"  # pending | assigned | terminal
    node_id: Optional[str] = None
    result: Optional[SessionResult] = None
    retries_used: int = 0


@dataclass
class TaskState:
    task: TaskRequest
    sessions: dict[str, _SessionTracking]
    created_at: float
    completed_at: Optional[float] = None
    callback_sent: bool = False
    order: list[str] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return all(s.state == "terminal" for s in self.sessions.values())


class Journal:
    """Append-only JSON-lines log, flushed per record."""

    def __init__(self, path: str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: Json) -> None:
        line = dumps_canonical(record)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    @staticmethod
    def replay(path: str) -> list[Json]:
        p = Path(path)
        if not p.exists():
            return []
        records = []
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError:
                    log.warning("skipping corrupt journal line: %.80s", line)
        return records


class RolloutServer:
    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self._lock = threading.Lock()
        self._tasks: dict[str, TaskState] = {}
        self._nodes: dict[str, NodeInfo] = {}
        # Dispatches since a node's last heartbeat; its next heartbeat
        # reflects them in occupancy, so the counter resets then.
        self._inflight: dict[str, int] = {}
        self._stopping = threading.Event()
        self._scheduler_thread: Optional[threading.Thread] = None
        self._replay()
        self.journal = Journal(config.journal_path)

        router = Router()
        router.add("POST", r"/rollout/task/submit", self._http_submit)
        router.add("GET", r"/rollout/task/(?P<task_id>[^/]+)", self._http_poll)
        router.add("GET", r"/rollout/status", self._http_status)
        router.add("POST", r"/callbacks/session_result", self._http_session_callback)
        router.add("POST", r"/nodes/register", self._http_register_node)
        router.add("POST", r"/nodes/(?P<node_id>[^/]+)/heartbeat", self._http_heartbeat)
        router.add("GET", r"/healthz", lambda req: Response(payload={"ok": True}))
        self.http = HttpService(router, host=config.host, port=config.port, name="rollout")

    # -- startup / shutdown ----------------------------------------------------

    @property
    def url(self) -> str:
        return self.http.url

    def start(self) -> "RolloutServer":
        self.http.start()
        self._scheduler_thread = threading.Thread(target=self._scheduler_loop, name="rollout-scheduler", daemon=True)
        self._scheduler_thread.start()
        # Re-fire callbacks for tasks that went terminal right before a crash.
        for task_id in list(self._tasks):
            self._maybe_fire_task_callback(task_id)
        log.info("rollout server listening on %s (journal %s)", self.url, self.config.journal_path)
        return self

    def stop(self) -> None:
        self._stopping.set()
        self.http.stop()
        if self._scheduler_thread:
            self._scheduler_thread.join(timeout=5)
        self.journal.close()

    def _replay(self) -> None:
        for record in Journal.replay(self.config.journal_path):
            event = record.get("event")
            if event == "task_submitted":
                task = TaskRequest.from_dict(record["task"])
                sessions = [SessionSpec.from_dict(s) for s in record["sessions"]]
                state = TaskState(
                    task=task,
                    sessions={s.session_id: _SessionTracking(spec=s) for s in sessions},
                    created_at=record.get("created_at", 0.0),
                    order=[s.session_id for s in sessions],
                )
                self._tasks[task.task_id] = state
            elif event == "session_result":
                result = SessionResult.from_dict(record["result"])
                task = self._tasks.get(result.task_id)
                if task and result.session_id in task.sessions:
                    tracking = task.sessions[result.session_id]
                    tracking.result = result
                    tracking.state = "terminal"
                    if task.terminal and task.completed_at is None:
                        task.completed_at = record.get("at", 0.0)
            elif event == "session_requeued":
                task = self._tasks.get(record.get("task_id", ""))
                if task and record.get("session_id") in task.sessions:
                    tracking = task.sessions[record["session_id"]]
                    tracking.retries_used += 1
                    if record.get("new_deadline"):
                        tracking.spec = SessionSpec.from_dict({**tracking.spec.to_dict(), "deadline": record["new_deadline"]})
            elif event == "task_callback_sent":
                task = self._tasks.get(record.get("task_id", ""))
                if task:
                    task.callback_sent = True
        if self._tasks:
            log.info("replayed %d tasks from journal", len(self._tasks))

    # -- task intake -------------------------------------------------------------

    def submit_task(self, payload: Json) -> tuple[int, Json]:
        task = TaskRequest.from_dict(payload)
        errors = validate_task(task)
        if errors:
            return 400, {"error": "invalid task", "violations": errors}
        now = time.time()
        with self._lock:
            if task.task_id in self._tasks:
                return 409, {"error": f"duplicate task_id {task.task_id!r}"}
            sessions = expand_task(task, now)
            state = TaskState(
                task=task,
                sessions={s.session_id: _SessionTracking(spec=s) for s in sessions},
                created_at=now,
                order=[s.session_id for s in sessions],
            )
            self._tasks[task.task_id] = state
        self.journal.append(
            {
                "event": "task_submitted",
                "task": task.to_dict(),
                "sessions": [s.to_dict() for s in sessions],
                "created_at": now,
            }
        )
        return 200, {"task_id": task.task_id, "session_ids": [s.session_id for s in sessions]}

    def poll_task(self, task_id: str) -> Optional[Json]:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                return None
            sessions_doc = {}
            results_doc = {}
            for sid in task.order:
                tracking = task.sessions[sid]
                sessions_doc[sid] = {
                    "state": tracking.state,
                    "node_id": tracking.node_id,
                    "retries_used": tracking.retries_used,
                    "sample_index": tracking.spec.sample_index,
                }
                if tracking.result is not None:
                    results_doc[sid] = tracking.result.to_dict()
            return {
                "task_id": task_id,
                "status": "completed" if task.terminal else "running",
                "created_at": task.created_at,
                "completed_at": task.completed_at,
                "num_samples": task.task.num_samples,
                "sessions": sessions_doc,
                "results": results_doc,
            }

    # -- scheduling ---------------------------------------------------------------

    def _scheduler_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                self._sweep_stale_nodes()
                self.schedule_tick()
            except Exception:  # noqa: BLE001
                log.exception("scheduler tick failed")
            self._stopping.wait(self.config.schedule_interval)

    def _live_nodes(self, now: float) -> list[NodeInfo]:
        horizon = STALE_HEARTBEATS * self.config.heartbeat_interval
        return [n for n in self._nodes.values() if now - n.last_heartbeat <= horizon]

    @staticmethod
    def _load_ratio(node: NodeInfo) -> float:
        occ = sum(node.occupancy.get(stage, 0) for stage in ("INIT", "READY", "RUNNING"))
        cap = sum(node.stage_capacities.get(stage, 0) for stage in ("INIT", "READY", "RUNNING"))
        return occ / cap if cap else 1.0

    def schedule_tick(self) -> list[tuple[str, str]]:
        """Assign pending sessions to live nodes, least-loaded first."""
        now = time.time()
        with self._lock:
            pending: list[tuple[TaskState, _SessionTracking]] = []
            for task in self._tasks.values():
                for sid in task.order:
                    tracking = task.sessions[sid]
                    if tracking.state == "pending":
                        pending.append((task, tracking))
            candidates = {n.node_id: n for n in self._live_nodes(now)}
        if not pending or not candidates:
            return []

        # Shadow occupancy so neither one tick nor the gap between heartbeats
        # can oversubscribe a node.
        shadow = {nid: dict(n.occupancy) for nid, n in candidates.items()}
        with self._lock:
            for nid in shadow:
                shadow[nid]["INIT"] = shadow[nid].get("INIT", 0) + self._inflight.get(nid, 0)
        assignments: list[tuple[str, str]] = []
        for task, tracking in pending:
            ranked = sorted(
                (
                    n
                    for n in candidates.values()
                    if shadow[n.node_id].get("INIT", 0) < n.stage_capacities.get("INIT", 0)
                ),
                key=lambda n: (
                    self._shadow_ratio(n, shadow[n.node_id]),
                    n.node_id,
                ),
            )
            if not ranked:
                break
            node = ranked[0]
            if self._dispatch(node, tracking.spec):
                with self._lock:
                    tracking.state = "assigned"
                    tracking.node_id = node.node_id
                    self._inflight[node.node_id] = self._inflight.get(node.node_id, 0) + 1
                shadow[node.node_id]["INIT"] = shadow[node.node_id].get("INIT", 0) + 1
                assignments.append((tracking.spec.session_id, node.node_id))
        return assignments

    @staticmethod
    def _shadow_ratio(node: NodeInfo, occupancy: dict[str, int]) -> float:
        occ = sum(occupancy.get(stage, 0) for stage in ("INIT", "READY", "RUNNING"))
        cap = sum(node.stage_capacities.get(stage, 0) for stage in ("INIT", "READY", "RUNNING"))
        return occ / cap if cap else 1.0

    def _dispatch(self, node: NodeInfo, spec: SessionSpec) -> bool:
        try:
            resp = requests.post(node.base_url.rstrip("/") + "/sessions", json=spec.to_dict(), timeout=10)
        except requests.RequestException as exc:
            log.debug("dispatch to %s failed: %s", node.node_id, exc)
            return False
        if resp.status_code == 200:
            return True
        if resp.status_code == 409:
            # Session already lives there (e.g. re-dispatch after a server restart).
            return True
        return False

    def _sweep_stale_nodes(self) -> None:
        now = time.time()
        horizon = STALE_HEARTBEATS * self.config.heartbeat_interval
        stale_sessions: list[tuple[TaskState, _SessionTracking]] = []
        with self._lock:
            stale_nodes = {nid for nid, n in self._nodes.items() if now - n.last_heartbeat > horizon}
            if not stale_nodes:
                return
            for task in self._tasks.values():
                for tracking in task.sessions.values():
                    if tracking.state == "assigned" and tracking.node_id in stale_nodes:
                        stale_sessions.append((task, tracking))
        for task, tracking in stale_sessions:
            self._requeue_or_fail(task, tracking, reason=f"node {tracking.node_id} lost")

    def _requeue_or_fail(self, task: TaskState, tracking: _SessionTracking, reason: str) -> None:
        with self._lock:
            if tracking.state == "terminal":
                return
            if tracking.retries_used < self.config.max_retries:
                tracking.retries_used += 1
                tracking.state = "pending"
                tracking.node_id = None
                new_deadline = time.time() + task.task.timeout_seconds
                tracking.spec = SessionSpec.from_dict({**tracking.spec.to_dict(), "deadline": new_deadline})
                self.journal.append(
                    {
                        "event": "session_requeued",
                        "task_id": task.task.task_id,
                        "session_id": tracking.spec.session_id,
                        "reason": reason,
                        "new_deadline": new_deadline,
                    }
                )
                log.info("requeued session %s (%s)", tracking.spec.session_id, reason)
                return
            # Retries exhausted: synthesize a terminal error result.
            result = SessionResult(
                session_id=tracking.spec.session_id,
                task_id=task.task.task_id,
                status="error",
                evaluator_report={"reward": 0.0, "detail": {"error": reason}},
            )
        self._record_terminal(result)

    # -- callbacks -------------------------------------------------------------------

    def handle_session_callback(self, result: SessionResult) -> Json:
        with self._lock:
            task = self._tasks.get(result.task_id)
            tracking = task.sessions.get(result.session_id) if task else None
        if task is None or tracking is None:
            return {"ack": True, "warning": f"unknown session {result.session_id!r}"}
        if tracking.state == "terminal":
            return {"ack": True, "duplicate": True}
        if tracking.state == "pending":
            # A requeued session has no live attempt; this is a stale redelivery
            # (at-least-once callbacks). Accepting it would burn the retry.
            return {"ack": True, "stale": True}
        if result.status == "empty_generation" and tracking.retries_used < self.config.max_retries:
            # Clear the old attempt off the gateway before the session becomes
            # schedulable again, so a fast re-dispatch cannot be deleted late.
            self._best_effort_delete(tracking.node_id, result.session_id)
            self._requeue_or_fail(task, tracking, reason="empty_generation retry")
            return {"ack": True, "requeued": True}
        self._record_terminal(result)
        return {"ack": True}

    def _record_terminal(self, result: SessionResult) -> None:
        fire = False
        with self._lock:
            task = self._tasks.get(result.task_id)
            if task is None:
                return
            tracking = task.sessions.get(result.session_id)
            if tracking is None or tracking.state == "terminal":
                return
            tracking.state = "terminal"
            tracking.result = result
            node_id = tracking.node_id
            if task.terminal:
                task.completed_at = time.time()
                fire = True
        self.journal.append({"event": "session_result", "result": result.to_dict(), "at": time.time()})
        # The result is durable now; the gateway's cached copy can go. Done off
        # the callback thread so the gateway's ack is not delayed.
        threading.Thread(
            target=self._best_effort_delete, args=(node_id, result.session_id), daemon=True
        ).start()
        if fire:
            self._maybe_fire_task_callback(result.task_id)

    def _maybe_fire_task_callback(self, task_id: str) -> None:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None or not task.terminal or task.callback_sent or not task.task.callback_url:
                return
            task.callback_sent = True  # single fire; delivery itself is retried
            payload = {
                "task_id": task_id,
                "status": "completed",
                "results": [task.sessions[sid].result.to_dict() for sid in task.order],
            }
            url = task.task.callback_url

        def _deliver() -> None:
            resp = post_with_retries(url, payload, attempts=self.config.callback_attempts)
            if resp is not None and resp.status_code < 400:
                try:
                    self.journal.append({"event": "task_callback_sent", "task_id": task_id})
                except ValueError:
                    pass  # journal already closed during shutdown; replay refires
            else:
                log.warning("task callback delivery failed for %s", task_id)
                with self._lock:
                    task = self._tasks.get(task_id)
                    if task:
                        task.callback_sent = False  # allow a later refire

        threading.Thread(target=_deliver, name=f"task-callback-{task_id[:16]}", daemon=True).start()

    def _best_effort_delete(self, node_id: Optional[str], session_id: str) -> None:
        with self._lock:
            node = self._nodes.get(node_id or "")
        if node is None:
            return
        try:
            requests.delete(f"{node.base_url.rstrip('/')}/sessions/{session_id}", timeout=5)
        except requests.RequestException:
            pass

    # -- node registry ------------------------------------------------------------------

    def register_node(self, info: NodeInfo) -> None:
        info.last_heartbeat = time.time()
        with self._lock:
            self._nodes[info.node_id] = info
            self._inflight[info.node_id] = 0

    def heartbeat(self, node_id: str, occupancy: dict[str, int]) -> tuple[int, Json]:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None:
                return 404, {"error": f"unknown node {node_id!r}"}
            for stage, occ in occupancy.items():
                if occ > node.stage_capacities.get(stage, 0):
                    return 400, {"error": f"occupancy for {stage} exceeds capacity"}
            node.occupancy = dict(occupancy)
            node.last_heartbeat = time.time()
            self._inflight[node_id] = 0
        return 200, {"ack": True}

    # -- HTTP surface ----------------------------------------------------------------------

    def _http_submit(self, request: Request) -> Response:
        status, payload = self.submit_task(request.json())
        return Response(status=status, payload=payload)

    def _http_poll(self, request: Request, task_id: str) -> Response:
        doc = self.poll_task(task_id)
        if doc is None:
            return json_error(404, f"unknown task {task_id!r}")
        return Response(payload=doc)

    def _http_status(self, request: Request) -> Response:
        with self._lock:
            tasks_doc = {}
            pending_total = 0
            for task_id, task in self._tasks.items():
                counts = {"pending": 0, "assigned": 0, "terminal": 0}
                for tracking in task.sessions.values():
                    counts[tracking.state] += 1
                pending_total += counts["pending"]
                tasks_doc[task_id] = {"status": "completed" if task.terminal else "running", **counts}
            nodes_doc = {nid: n.to_dict() for nid, n in self._nodes.items()}
        return Response(payload={"tasks": tasks_doc, "nodes": nodes_doc, "pending_sessions": pending_total})

    def _http_session_callback(self, request: Request) -> Response:
        result = SessionResult.from_dict(request.json())
        return Response(payload=self.handle_session_callback(result))

    def _http_register_node(self, request: Request) -> Response:
        info = NodeInfo.from_dict(request.json())
        if not info.node_id or not info.base_url:
            return json_error(400, "node_id and base_url are required")
        self.register_node(info)
        return Response(payload={"ack": True, "node_id": info.node_id})

    def _http_heartbeat(self, request: Request, node_id: str) -> Response:
        payload = request.json()
        status, doc = self.heartbeat(node_id, {k: int(v) for k, v in (payload.get("occupancy") or {}).items()})
        return Response(status=status, payload=doc)

"""Gateway node: per-session lifecycle through stage-isolated worker pools.

INIT starts the runtime, runs prepare actions, and installs the harness
configuration; initialized sessions wait in a bounded READY buffer until a
RUNNING slot frees up; RUNNING executes the harness commands under the
session deadline; POSTRUN builds the trajectory, runs the evaluator
(against a prewarmed runtime when one was requested), sends the callback,
and tears everything down. The READY buffer is the only cross-stage handoff
and applies backpressure: a full buffer blocks INIT workers, an empty one
idles RUNNING workers, so CPU-heavy preparation overlaps agent execution
without ever exceeding the configured pool bounds.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional

from . import builders, evaluators, harness
from .httpd import HttpService, Request, Response, Router, json_error, post_with_retries
from .model import Json, SessionResult, SessionSpec, Trajectory
from .proxy import SessionRegistry
from .runtime import Runtime, create_runtime, run_prepare_actions

log = logging.getLogger(__name__)

_STOP = object()


@dataclass
class GatewayConfig:
    inference_url: str
    rollout_url: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 0
    node_id: str = ""
    advertise_url: Optional[str] = None
    init_pool: int = 2
    running_pool: int = 2
    postrun_pool: int = 2
    ready_bound: int = 4
    heartbeat_interval: float = 1.0
    postrun_budget: float = 120.0
    callback_attempts: int = 15

    def __post_init__(self) -> None:
        if not self.node_id:
            self.node_id = f"node-{uuid.uuid4().hex[:8]}"
        for name in ("init_pool", "running_pool", "postrun_pool", "ready_bound"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class _SessionState:
    spec: SessionSpec
    stage: str = "init"
    outcome: Optional[str] = None
    error_detail: str = ""
    launch: Optional[harness.HarnessLaunch] = None
    runtime: Optional[Runtime] = None
    prewarm_thread: Optional[threading.Thread] = None
    prewarmed_runtime: Optional[Runtime] = None
    prewarm_error: str = ""
    result: Optional[SessionResult] = None
    cancelled: bool = False
    stamps: dict[str, float] = field(default_factory=dict)

    def stamp(self, name: str) -> None:
        self.stamps[name] = time.time()


class GatewayNode:
    def __init__(self, config: GatewayConfig, registry: Optional[SessionRegistry] = None) -> None:
        self.config = config
        self.registry = registry or SessionRegistry()
        self._sessions: dict[str, _SessionState] = {}
        self._lock = threading.Lock()
        self._occ = {"INIT": 0, "RUNNING": 0, "POSTRUN": 0}
        self._ready: queue.Queue[Any] = queue.Queue(maxsize=config.ready_bound)
        self._init_pool = ThreadPoolExecutor(max_workers=config.init_pool, thread_name_prefix="gw-init")
        self._postrun_pool = ThreadPoolExecutor(max_workers=config.postrun_pool, thread_name_prefix="gw-postrun")
        self._postrun_slots = threading.BoundedSemaphore(config.postrun_pool)
        self._running_threads: list[threading.Thread] = []
        self._heartbeat_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self._registered = False

        router = Router()
        router.add("POST", r"/sessions", self._http_create_session)
        router.add("GET", r"/sessions/(?P<session_id>[^/]+)", self._http_get_session)
        router.add("DELETE", r"/sessions/(?P<session_id>[^/]+)", self._http_delete_session)
        router.add(None, r"/proxy/(?P<session_id>[^/]+)(?P<subpath>/.*)", self._http_proxy)
        router.add("GET", r"/healthz", lambda req: Response(payload={"ok": True, "node_id": config.node_id}))
        self.http = HttpService(router, host=config.host, port=config.port, name="gateway")

    # -- lifecycle -----------------------------------------------------------

    @property
    def url(self) -> str:
        return self.http.url

    @property
    def advertise_url(self) -> str:
        return self.config.advertise_url or self.url

    def start(self) -> "GatewayNode":
        self.http.start()
        for i in range(self.config.running_pool):
            thread = threading.Thread(target=self._running_worker, name=f"gw-run-{i}", daemon=True)
            thread.start()
            self._running_threads.append(thread)
        if self.config.rollout_url:
            self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, name="gw-heartbeat", daemon=True)
            self._heartbeat_thread.start()
        log.info("gateway %s listening on %s", self.config.node_id, self.url)
        return self

    def stop(self) -> None:
        self._stopping.set()
        for _ in self._running_threads:
            try:
                self._ready.put_nowait(_STOP)
            except queue.Full:
                break
        self.http.stop()
        self._init_pool.shutdown(wait=False)
        self._postrun_pool.shutdown(wait=False)
        with self._lock:
            states = list(self._sessions.values())
        for state in states:
            for rt in (state.runtime, state.prewarmed_runtime):
                if rt is not None:
                    try:
                        rt.stop()
                    except Exception:  # noqa: BLE001 - teardown is best effort
                        pass

    def occupancy(self) -> dict[str, int]:
        with self._lock:
            occ = dict(self._occ)
        occ["READY"] = self._ready.qsize()
        return occ

    def stage_capacities(self) -> dict[str, int]:
        return {
            "INIT": self.config.init_pool,
            "READY": self.config.ready_bound,
            "RUNNING": self.config.running_pool,
            "POSTRUN": self.config.postrun_pool,
        }

    # -- session admission ----------------------------------------------------

    def create_session(self, spec: SessionSpec) -> tuple[bool, str]:
        """Admit a session into INIT; (accepted, reason-if-rejected)."""
        with self._lock:
            existing = self._sessions.get(spec.session_id)
            if existing is not None and existing.stage != "terminal":
                return False, "duplicate"
            if self._occ["INIT"] >= self.config.init_pool:
                return False, "capacity"
            self._occ["INIT"] += 1
            state = _SessionState(spec=spec)
            state.stamp("admitted")
            self._sessions[spec.session_id] = state
        self._init_pool.submit(self._run_init, state)
        return True, ""

    def get_state(self, session_id: str) -> Optional[_SessionState]:
        with self._lock:
            return self._sessions.get(session_id)

    def delete_session(self, session_id: str) -> None:
        """Idempotent cleanup: cancel a live session, release the cached result."""
        with self._lock:
            state = self._sessions.pop(session_id, None)
        self.registry.close_session(session_id)
        self.registry.delete_session(session_id)
        if state is not None:
            state.cancelled = True
            for rt in (state.runtime, state.prewarmed_runtime):
                if rt is not None:
                    try:
                        rt.cancel()
                        rt.stop()
                    except Exception:  # noqa: BLE001
                        pass

    # -- INIT stage -----------------------------------------------------------

    def _run_init(self, state: _SessionState) -> None:
        spec = state.spec
        state.stamp("init_start")
        try:
            rt = create_runtime(spec.runtime, spec.session_id)
            rt.start()
            state.runtime = rt
            run_prepare_actions(rt, spec.runtime, deadline=spec.deadline)
            base_url, token = self.registry.issue_credentials(spec, self.advertise_url, self.config.inference_url)
            adapter = harness.resolve_harness(spec.agent.harness)
            state.launch = adapter(spec, rt, base_url, token)
        except Exception as exc:  # noqa: BLE001 - any init failure is a terminal error result
            state.error_detail = f"init failed: {exc}"
            state.stamp("init_end")
            with self._lock:
                self._occ["INIT"] -= 1
            log.warning("session %s init failed: %s", spec.session_id, exc)
            self._hand_to_postrun(state, "error")
            return
        state.stamp("init_end")
        state.stage = "ready"
        self._ready.put(state)  # blocks while the READY buffer is full (backpressure)
        with self._lock:
            self._occ["INIT"] -= 1

    # -- RUNNING stage ----------------------------------------------------------

    def _running_worker(self) -> None:
        while True:
            item = self._ready.get()
            if item is _STOP or self._stopping.is_set():
                return
            state: _SessionState = item
            state.stage = "running"
            state.stamp("run_start")
            with self._lock:
                self._occ["RUNNING"] += 1
            try:
                if state.spec.evaluator.refresh_runtime:
                    self._start_prewarm(state)
                outcome = "error" if state.cancelled else self._execute_harness(state)
            finally:
                state.stamp("run_end")
            self._hand_to_postrun(state, outcome, release_running=True)

    def _execute_harness(self, state: _SessionState) -> str:
        spec = state.spec
        assert state.launch is not None and state.runtime is not None
        for command in state.launch.commands:
            remaining = spec.deadline - time.time()
            if remaining <= 0:
                return "timeout"
            result = state.runtime.exec(command, timeout=remaining, env=state.launch.env)
            if result.timed_out:
                return "timeout"
            if result.exit_code != 0:
                state.error_detail = (
                    f"harness command exited {result.exit_code}: "
                    f"{result.stderr.strip()[-2000:] or result.stdout.strip()[-2000:]}"
                )
                return "error"
        return "completed"

    def _start_prewarm(self, state: _SessionState) -> None:
        """Prepare the evaluator's fresh runtime concurrently with the agent run."""

        def _prewarm() -> None:
            state.stamp("prewarm_start")
            try:
                rt = create_runtime(state.spec.runtime, f"{state.spec.session_id}-eval")
                rt.start()
                run_prepare_actions(rt, state.spec.runtime, deadline=state.spec.deadline)
                state.prewarmed_runtime = rt
            except Exception as exc:  # noqa: BLE001
                state.prewarm_error = str(exc)
            finally:
                state.stamp("prewarm_end")

        state.prewarm_thread = threading.Thread(
            target=_prewarm, name=f"gw-prewarm-{state.spec.session_id[:16]}", daemon=True
        )
        state.prewarm_thread.start()

    # -- POSTRUN stage ----------------------------------------------------------

    def _hand_to_postrun(self, state: _SessionState, outcome: str, release_running: bool = False) -> None:
        # The session keeps its current-stage slot until a POSTRUN slot frees up.
        self._postrun_slots.acquire()
        if release_running:
            with self._lock:
                self._occ["RUNNING"] -= 1
        self._postrun_pool.submit(self._run_postrun_guarded, state, outcome)

    def _run_postrun_guarded(self, state: _SessionState, outcome: str) -> None:
        with self._lock:
            self._occ["POSTRUN"] += 1
        try:
            self._run_postrun(state, outcome)
        except Exception:  # noqa: BLE001
            log.exception("postrun crashed for session %s", state.spec.session_id)
        finally:
            with self._lock:
                self._occ["POSTRUN"] -= 1
            self._postrun_slots.release()

    def _run_postrun(self, state: _SessionState, outcome: str) -> None:
        spec = state.spec
        state.stage = "postrun"
        state.stamp("postrun_start")
        budget_deadline = time.monotonic() + self.config.postrun_budget

        self.registry.close_session(spec.session_id)
        entry = self.registry.get(spec.session_id)
        snapshot = self.registry.snapshot_session(spec.session_id) if entry else None
        completions = snapshot.completions if snapshot else []
        if outcome in ("completed", "timeout") and not completions:
            outcome = "empty_generation"

        status = outcome
        trajectory: Optional[Trajectory] = None
        if snapshot is not None and completions:
            context = {"task_id": spec.task_id, "harness": spec.agent.harness, "metadata": spec.metadata}
            try:
                trajectory = builders.build(spec.builder.strategy, snapshot, spec.builder.config, context)
            except Exception as exc:  # noqa: BLE001
                status = "error"
                state.error_detail = f"trajectory build failed: {exc}"

        report: Json = {}
        if status != "error":
            report = self._run_evaluator(state, outcome, trajectory, budget_deadline)
            if report.get("detail", {}).get("evaluator_crashed"):
                status = "error"
        if state.error_detail and "error" not in report.get("detail", {}):
            report.setdefault("detail", {})["error"] = state.error_detail

        if trajectory is not None and report:
            trajectory = evaluators.propagate_reward(trajectory, report)

        artifacts = self._collect_artifacts(state)
        state.stamp("postrun_end")
        result = SessionResult(
            session_id=spec.session_id,
            task_id=spec.task_id,
            status=status,
            trajectory=trajectory,
            evaluator_report=report,
            stage_durations=self._stage_durations(state),
            artifacts=artifacts,
        )
        state.result = result
        state.outcome = status
        state.stage = "terminal"

        for rt in (state.runtime, state.prewarmed_runtime):
            if rt is not None:
                try:
                    rt.stop()
                except Exception:  # noqa: BLE001
                    pass

        if self.config.rollout_url and not state.cancelled:
            url = self.config.rollout_url.rstrip("/") + "/callbacks/session_result"
            ack = post_with_retries(url, result.to_dict(), attempts=self.config.callback_attempts)
            if ack is None or ack.status_code >= 400:
                log.warning("session %s callback delivery failed", spec.session_id)

    def _run_evaluator(
        self,
        state: _SessionState,
        outcome: str,
        trajectory: Optional[Trajectory],
        budget_deadline: float,
    ) -> Json:
        spec = state.spec
        eval_runtime: Optional[Runtime] = state.runtime
        if spec.evaluator.refresh_runtime:
            if state.prewarm_thread is not None:
                state.prewarm_thread.join(timeout=max(0.1, budget_deadline - time.monotonic()))
            if state.prewarmed_runtime is None:
                return {
                    "reward": 0.0,
                    "evaluator": spec.evaluator.strategy,
                    "detail": {"evaluator_crashed": True, "error": f"prewarm failed: {state.prewarm_error or 'not ready'}"},
                    "duration": 0.0,
                }
            eval_runtime = state.prewarmed_runtime
        try:
            fn = evaluators.resolve_evaluator(spec.evaluator.strategy)
            budget = max(0.5, budget_deadline - time.monotonic())
            return fn(outcome, trajectory, runtime=eval_runtime, config=spec.evaluator.config, budget=budget)
        except Exception as exc:  # noqa: BLE001
            return {
                "reward": 0.0,
                "evaluator": spec.evaluator.strategy,
                "detail": {"evaluator_crashed": True, "error": str(exc)},
                "duration": 0.0,
            }

    def _collect_artifacts(self, state: _SessionState) -> Optional[list[Json]]:
        paths = state.spec.evaluator.config.get("artifact_paths") or []
        if not paths or state.runtime is None:
            return None
        import base64
        import hashlib

        manifest: list[Json] = []
        for path in paths:
            entry: Json = {"path": path}
            try:
                blob = state.runtime.download(path)
                entry["size"] = len(blob)
                entry["sha256"] = hashlib.sha256(blob).hexdigest()
                if len(blob) <= 65536:
                    entry["content_b64"] = base64.b64encode(blob).decode("ascii")
                else:
                    entry["truncated"] = True
            except Exception as exc:  # noqa: BLE001
                entry["error"] = str(exc)
            manifest.append(entry)
        return manifest

    @staticmethod
    def _stage_durations(state: _SessionState) -> dict[str, float]:
        s = state.stamps
        durations: dict[str, float] = {}
        if "init_start" in s and "init_end" in s:
            durations["init"] = round(s["init_end"] - s["init_start"], 6)
        if "init_end" in s and "run_start" in s:
            durations["ready"] = round(max(0.0, s["run_start"] - s["init_end"]), 6)
        if "run_start" in s and "run_end" in s:
            durations["running"] = round(s["run_end"] - s["run_start"], 6)
        if "postrun_start" in s and "postrun_end" in s:
            durations["postrun"] = round(s["postrun_end"] - s["postrun_start"], 6)
        return durations

    # -- node registration ------------------------------------------------------

    def _heartbeat_loop(self) -> None:
        assert self.config.rollout_url is not None
        base = self.config.rollout_url.rstrip("/")
        while not self._stopping.is_set():
            try:
                if not self._registered:
                    resp = post_with_retries(
                        base + "/nodes/register",
                        {
                            "node_id": self.config.node_id,
                            "base_url": self.advertise_url,
                            "stage_capacities": self.stage_capacities(),
                            "occupancy": self.occupancy(),
                        },
                        attempts=1,
                    )
                    self._registered = resp is not None and resp.status_code == 200
                else:
                    resp = post_with_retries(
                        f"{base}/nodes/{self.config.node_id}/heartbeat",
                        {"occupancy": self.occupancy()},
                        attempts=1,
                    )
                    if resp is None or resp.status_code == 404:
                        self._registered = False  # server restarted; re-register
            except Exception:  # noqa: BLE001
                log.debug("heartbeat failed", exc_info=True)
            self._stopping.wait(self.config.heartbeat_interval)

    # -- HTTP surface -------------------------------------------------------------

    def _http_create_session(self, request: Request) -> Response:
        spec = SessionSpec.from_dict(request.json())
        if not spec.session_id:
            return json_error(400, "session_id is required")
        accepted, reason = self.create_session(spec)
        if accepted:
            return Response(payload={"accepted": True, "node_id": self.config.node_id})
        if reason == "duplicate":
            return json_error(409, f"duplicate session {spec.session_id!r}")
        return json_error(429, "no INIT capacity")

    def _http_get_session(self, request: Request, session_id: str) -> Response:
        state = self.get_state(session_id)
        if state is None:
            return json_error(404, f"unknown session {session_id!r}")
        doc: Json = {
            "session_id": session_id,
            "stage": state.stage,
            "status": state.outcome,
            "captured_completions": self.registry.completion_count(session_id),
            "stamps": state.stamps,
        }
        if state.result is not None:
            doc["result"] = state.result.to_dict()
        return Response(payload=doc)

    def _http_delete_session(self, request: Request, session_id: str) -> Response:
        self.delete_session(session_id)
        return Response(payload={"deleted": session_id})

    def _http_proxy(self, request: Request, session_id: str, subpath: str) -> Response:
        try:
            payload = request.json()
        except Exception:  # noqa: BLE001
            return json_error(400, "proxy requests must carry a JSON body")
        return self.registry.handle_model_request(session_id, subpath, request.headers, request.query, payload)


def build_gateway(config: GatewayConfig) -> GatewayNode:
    return GatewayNode(config)

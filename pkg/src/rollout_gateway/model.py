"""Shared domain types, invariant checks, and canonical JSON serialization.

Everything the services exchange lives here: tasks, sessions, captured
completions, trainer-facing traces, terminal results, and node records.
All types are immutable value objects after construction and safe to share
across threads; serialization uses stable key ordering so persisted files
compare byte-for-byte.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Optional

RUNTIME_BACKENDS = ("local_process", "docker", "apptainer")
FINISH_REASONS = ("stop", "length", "tool_calls", "error")
SESSION_STATUSES = ("completed", "timeout", "error", "empty_generation")
STAGES = ("INIT", "READY", "RUNNING", "POSTRUN")

Json = dict[str, Any]


def dumps_canonical(obj: Any) -> str:
    """Stable JSON encoding: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _scalar(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))


# ---------------------------------------------------------------------------
# Task and session specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrepareAction:
    type: str  # "exec" or "upload"
    command: Optional[str] = None
    source: Optional[str] = None
    dest: Optional[str] = None

    def to_dict(self) -> Json:
        if self.type == "exec":
            return {"type": "exec", "command": self.command}
        return {"type": "upload", "source": self.source, "dest": self.dest}

    @classmethod
    def from_dict(cls, d: Json) -> "PrepareAction":
        return cls(
            type=d.get("type", ""),
            command=d.get("command"),
            source=d.get("source"),
            dest=d.get("dest"),
        )


@dataclass(frozen=True)
class RuntimeSpec:
    backend: str = "local_process"
    image: Optional[str] = None
    workdir: str = "workspace"
    network: Optional[str] = None
    prepare: tuple[PrepareAction, ...] = ()
    env: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {
            "backend": self.backend,
            "image": self.image,
            "workdir": self.workdir,
            "network": self.network,
            "prepare": [a.to_dict() for a in self.prepare],
            "env": dict(self.env),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "RuntimeSpec":
        return cls(
            backend=d.get("backend", "local_process"),
            image=d.get("image"),
            workdir=d.get("workdir", ""),
            network=d.get("network"),
            prepare=tuple(PrepareAction.from_dict(a) for a in d.get("prepare") or []),
            env=dict(d.get("env") or {}),
        )


@dataclass(frozen=True)
class AgentSpec:
    harness: str
    model_name: str = "default-model"
    harness_config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {
            "harness": self.harness,
            "model_name": self.model_name,
            "harness_config": dict(self.harness_config),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "AgentSpec":
        return cls(
            harness=d.get("harness", ""),
            model_name=d.get("model_name", "default-model"),
            harness_config=dict(d.get("harness_config") or {}),
        )


@dataclass(frozen=True)
class BuilderSpec:
    strategy: str = "per_request"
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {"strategy": self.strategy, "config": dict(self.config)}

    @classmethod
    def from_dict(cls, d: Json) -> "BuilderSpec":
        return cls(strategy=d.get("strategy", "per_request"), config=dict(d.get("config") or {}))


@dataclass(frozen=True)
class EvaluatorSpec:
    strategy: str = "session_completion"
    refresh_runtime: bool = False
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {
            "strategy": self.strategy,
            "refresh_runtime": self.refresh_runtime,
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "EvaluatorSpec":
        return cls(
            strategy=d.get("strategy", "session_completion"),
            refresh_runtime=bool(d.get("refresh_runtime", False)),
            config=dict(d.get("config") or {}),
        )


@dataclass(frozen=True)
class TaskRequest:
    task_id: str
    instruction: str
    num_samples: int
    timeout_seconds: float
    runtime: RuntimeSpec
    agent: AgentSpec
    builder: BuilderSpec = field(default_factory=BuilderSpec)
    evaluator: EvaluatorSpec = field(default_factory=EvaluatorSpec)
    callback_url: Optional[str] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "num_samples": self.num_samples,
            "timeout_seconds": self.timeout_seconds,
            "runtime": self.runtime.to_dict(),
            "agent": self.agent.to_dict(),
            "builder": self.builder.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "callback_url": self.callback_url,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "TaskRequest":
        return cls(
            task_id=d.get("task_id", ""),
            instruction=d.get("instruction", ""),
            num_samples=d.get("num_samples", 0),
            timeout_seconds=d.get("timeout_seconds", 0),
            runtime=RuntimeSpec.from_dict(d.get("runtime") or {}),
            agent=AgentSpec.from_dict(d.get("agent") or {}),
            builder=BuilderSpec.from_dict(d.get("builder") or {}),
            evaluator=EvaluatorSpec.from_dict(d.get("evaluator") or {}),
            callback_url=d.get("callback_url"),
            metadata=dict(d.get("metadata") or {}),
        )


@dataclass(frozen=True)
class SessionSpec:
    session_id: str
    task_id: str
    sample_index: int
    deadline: float  # absolute epoch seconds
    runtime: RuntimeSpec
    agent: AgentSpec
    builder: BuilderSpec
    evaluator: EvaluatorSpec
    callback_url: Optional[str] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Json:
        return {
            "session_id": self.session_id,
            "task_id": self.task_id,
            "sample_index": self.sample_index,
            "deadline": self.deadline,
            "runtime": self.runtime.to_dict(),
            "agent": self.agent.to_dict(),
            "builder": self.builder.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "callback_url": self.callback_url,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "SessionSpec":
        return cls(
            session_id=d.get("session_id", ""),
            task_id=d.get("task_id", ""),
            sample_index=int(d.get("sample_index", 0)),
            deadline=float(d.get("deadline", 0.0)),
            runtime=RuntimeSpec.from_dict(d.get("runtime") or {}),
            agent=AgentSpec.from_dict(d.get("agent") or {}),
            builder=BuilderSpec.from_dict(d.get("builder") or {}),
            evaluator=EvaluatorSpec.from_dict(d.get("evaluator") or {}),
            callback_url=d.get("callback_url"),
            metadata=dict(d.get("metadata") or {}),
        )


# ---------------------------------------------------------------------------
# Captured completions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogprobEntry:
    """One per-token log-probability record.

    `synthetic` marks interstitial placeholder entries inserted by the
    prefix-merging builder; those always carry logprob 0.0 and are never
    trainable. Captured entries have logprob <= 0.
    """

    token_id: int
    logprob: float
    token: Optional[str] = None
    synthetic: bool = False

    def to_dict(self) -> Json:
        d: Json = {"token_id": self.token_id, "logprob": self.logprob}
        if self.token is not None:
            d["token"] = self.token
        if self.synthetic:
            d["synthetic"] = True
        return d

    @classmethod
    def from_dict(cls, d: Json) -> "LogprobEntry":
        return cls(
            token_id=int(d["token_id"]),
            logprob=float(d["logprob"]),
            token=d.get("token"),
            synthetic=bool(d.get("synthetic", False)),
        )


@dataclass(frozen=True)
class CompletionRecord:
    """One captured model call: request/response messages plus token-level data."""

    seq: int
    provider: str
    request_messages: list[Json]
    response_messages: list[Json]
    tools: Optional[list[Json]]
    prompt_token_ids: list[int]
    response_token_ids: list[int]
    response_logprobs: list[LogprobEntry]
    finish_reason: str
    captured_at: float

    def to_dict(self) -> Json:
        return {
            "seq": self.seq,
            "provider": self.provider,
            "request_messages": self.request_messages,
            "response_messages": self.response_messages,
            "tools": self.tools,
            "prompt_token_ids": list(self.prompt_token_ids),
            "response_token_ids": list(self.response_token_ids),
            "response_logprobs": [e.to_dict() for e in self.response_logprobs],
            "finish_reason": self.finish_reason,
            "captured_at": self.captured_at,
        }

    @classmethod
    def from_dict(cls, d: Json) -> "CompletionRecord":
        return cls(
            seq=int(d["seq"]),
            provider=d.get("provider", ""),
            request_messages=list(d.get("request_messages") or []),
            response_messages=list(d.get("response_messages") or []),
            tools=d.get("tools"),
            prompt_token_ids=list(d.get("prompt_token_ids") or []),
            response_token_ids=list(d.get("response_token_ids") or []),
            response_logprobs=[LogprobEntry.from_dict(e) for e in d.get("response_logprobs") or []],
            finish_reason=d.get("finish_reason", "stop"),
            captured_at=float(d.get("captured_at", 0.0)),
        )


@dataclass(frozen=True)
class CompletionSession:
    session_id: str
    completions: list[CompletionRecord]

    def to_dict(self) -> Json:
        return {
            "session_id": self.session_id,
            "completions": [c.to_dict() for c in self.completions],
        }

    @classmethod
    def from_dict(cls, d: Json) -> "CompletionSession":
        return cls(
            session_id=d.get("session_id", ""),
            completions=[CompletionRecord.from_dict(c) for c in d.get("completions") or []],
        )


# ---------------------------------------------------------------------------
# Trainer-facing traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trace:
    prompt_ids: list[int]
    response_ids: list[int]
    loss_mask: list[int]
    response_logprobs: list[LogprobEntry]
    prompt_messages: list[Json]
    response_messages: list[Json]
    tools: Optional[list[Json]]
    finish_reason: str
    reward: Optional[float] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def with_reward(self, reward: Optional[float]) -> "Trace":
        return replace(self, reward=reward)

    def to_dict(self) -> Json:
        return {
            "prompt_ids": list(self.prompt_ids),
            "response_ids": list(self.response_ids),
            "loss_mask": list(self.loss_mask),
            "response_logprobs": [e.to_dict() for e in self.response_logprobs],
            "prompt_messages": self.prompt_messages,
            "response_messages": self.response_messages,
            "tools": self.tools,
            "finish_reason": self.finish_reason,
            "reward": self.reward,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "Trace":
        return cls(
            prompt_ids=list(d.get("prompt_ids") or []),
            response_ids=list(d.get("response_ids") or []),
            loss_mask=list(d.get("loss_mask") or []),
            response_logprobs=[LogprobEntry.from_dict(e) for e in d.get("response_logprobs") or []],
            prompt_messages=list(d.get("prompt_messages") or []),
            response_messages=list(d.get("response_messages") or []),
            tools=d.get("tools"),
            finish_reason=d.get("finish_reason", "stop"),
            reward=d.get("reward"),
            metadata=dict(d.get("metadata") or {}),
        )


@dataclass(frozen=True)
class Trajectory:
    session_id: str
    traces: list[Trace]
    builder_name: str
    build_diagnostics: dict[str, Any] = field(default_factory=dict)

    def with_traces(self, traces: list[Trace]) -> "Trajectory":
        return replace(self, traces=traces)

    def to_dict(self) -> Json:
        return {
            "session_id": self.session_id,
            "traces": [t.to_dict() for t in self.traces],
            "builder_name": self.builder_name,
            "build_diagnostics": dict(self.build_diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Json) -> "Trajectory":
        return cls(
            session_id=d.get("session_id", ""),
            traces=[Trace.from_dict(t) for t in d.get("traces") or []],
            builder_name=d.get("builder_name", ""),
            build_diagnostics=dict(d.get("build_diagnostics") or {}),
        )


@dataclass(frozen=True)
class SessionResult:
    session_id: str
    task_id: str
    status: str  # completed | timeout | error | empty_generation
    trajectory: Optional[Trajectory] = None
    evaluator_report: dict[str, Any] = field(default_factory=dict)
    stage_durations: dict[str, float] = field(default_factory=dict)
    artifacts: Optional[list[Json]] = None

    def to_dict(self) -> Json:
        return {
            "session_id": self.session_id,
            "task_id": self.task_id,
            "status": self.status,
            "trajectory": self.trajectory.to_dict() if self.trajectory else None,
            "evaluator_report": dict(self.evaluator_report),
            "stage_durations": dict(self.stage_durations),
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, d: Json) -> "SessionResult":
        traj = d.get("trajectory")
        return cls(
            session_id=d.get("session_id", ""),
            task_id=d.get("task_id", ""),
            status=d.get("status", "error"),
            trajectory=Trajectory.from_dict(traj) if traj else None,
            evaluator_report=dict(d.get("evaluator_report") or {}),
            stage_durations=dict(d.get("stage_durations") or {}),
            artifacts=d.get("artifacts"),
        )


@dataclass
class NodeInfo:
    node_id: str
    base_url: str
    stage_capacities: dict[str, int]
    occupancy: dict[str, int] = field(default_factory=dict)
    last_heartbeat: float = 0.0

    def to_dict(self) -> Json:
        return {
            "node_id": self.node_id,
            "base_url": self.base_url,
            "stage_capacities": dict(self.stage_capacities),
            "occupancy": dict(self.occupancy),
            "last_heartbeat": self.last_heartbeat,
        }

    @classmethod
    def from_dict(cls, d: Json) -> "NodeInfo":
        return cls(
            node_id=d.get("node_id", ""),
            base_url=d.get("base_url", ""),
            stage_capacities={k: int(v) for k, v in (d.get("stage_capacities") or {}).items()},
            occupancy={k: int(v) for k, v in (d.get("occupancy") or {}).items()},
            last_heartbeat=float(d.get("last_heartbeat", 0.0)),
        )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def validate_task(task: TaskRequest) -> list[str]:
    """Return every violated invariant of a task request (empty list = valid).

    Registry membership (harness/builder/evaluator names) is checked against
    the live registries so bad names fail at submission, not at session init.
    """
    # Local imports: the registries live in modules that import this one.
    from . import builders as builders_mod
    from . import evaluators as evaluators_mod
    from . import harness as harness_mod

    errors: list[str] = []
    if not isinstance(task.task_id, str) or not task.task_id:
        errors.append("task_id must be a nonempty string")
    if not isinstance(task.instruction, str):
        errors.append("instruction must be a string")
    if not isinstance(task.num_samples, int) or isinstance(task.num_samples, bool) or task.num_samples < 1:
        errors.append("num_samples must be ≥ 1")
    if not isinstance(task.timeout_seconds, (int, float)) or task.timeout_seconds <= 0:
        errors.append("timeout_seconds must be > 0")

    rt = task.runtime
    if rt.backend not in RUNTIME_BACKENDS:
        errors.append(f"unknown runtime backend {rt.backend!r}")
    if not rt.workdir:
        errors.append("runtime.workdir must be nonempty")
    for i, action in enumerate(rt.prepare):
        if action.type == "exec":
            if not action.command:
                errors.append(f"prepare action {i}: exec requires a command")
        elif action.type == "upload":
            if not action.source or not action.dest:
                errors.append(f"prepare action {i}: upload requires source and dest")
        else:
            errors.append(f"prepare action {i}: unknown type {action.type!r}")

    if not harness_mod.is_registered(task.agent.harness):
        errors.append(f"unresolvable harness {task.agent.harness!r}")

    if not builders_mod.is_registered(task.builder.strategy):
        errors.append(f"unresolvable builder {task.builder.strategy!r}")
    elif task.builder.strategy == "prefix_merging":
        eot = task.builder.config.get("end_of_turn_token_id")
        if not isinstance(eot, int) or isinstance(eot, bool) or eot < 0:
            errors.append("prefix_merging requires builder.config.end_of_turn_token_id ≥ 0")

    if not evaluators_mod.is_registered(task.evaluator.strategy):
        errors.append(f"unresolvable evaluator {task.evaluator.strategy!r}")

    if task.callback_url is not None and not str(task.callback_url).startswith(("http://", "https://")):
        errors.append(f"callback_url must be an http(s) URL, got {task.callback_url!r}")

    for key, value in task.metadata.items():
        if not _scalar(value):
            errors.append(f"metadata[{key!r}] must be a scalar")

    return errors


def new_session_id(task_id: str) -> str:
    # Task-id prefix keeps logs legible; the uuid body keeps ids unique at scale.
    return f"{task_id}-{uuid.uuid4().hex}"


def expand_task(task: TaskRequest, now: Optional[float] = None) -> list[SessionSpec]:
    """Expand a valid task into num_samples independent session specs."""
    if now is None:
        now = time.time()
    deadline = now + float(task.timeout_seconds)
    return [
        SessionSpec(
            session_id=new_session_id(task.task_id),
            task_id=task.task_id,
            sample_index=i,
            deadline=deadline,
            runtime=task.runtime,
            agent=task.agent,
            builder=task.builder,
            evaluator=task.evaluator,
            callback_url=task.callback_url,
            metadata=dict(task.metadata),
        )
        for i in range(task.num_samples)
    ]


def check_trace(trace: Trace) -> list[str]:
    """Verify length alignment and the mask/synthetic correspondence of a trace."""
    violations: list[str] = []
    n = len(trace.response_ids)
    if len(trace.loss_mask) != n:
        violations.append(f"loss_mask length {len(trace.loss_mask)} != response_ids length {n}")
    if len(trace.response_logprobs) != n:
        violations.append(f"response_logprobs length {len(trace.response_logprobs)} != response_ids length {n}")
    for k, m in enumerate(trace.loss_mask):
        if m not in (0, 1):
            violations.append(f"loss_mask[{k}] = {m!r} is not 0/1")
    for k, (m, entry) in enumerate(zip(trace.loss_mask, trace.response_logprobs)):
        if m == 1 and entry.synthetic:
            violations.append(f"position {k}: loss_mask=1 but logprob entry is synthetic")
        if m == 0 and not entry.synthetic:
            violations.append(f"position {k}: loss_mask=0 but logprob entry is not synthetic")
        if entry.synthetic and entry.logprob != 0.0:
            violations.append(f"position {k}: synthetic entry has logprob {entry.logprob} != 0.0")
        if not entry.synthetic and entry.logprob > 0:
            violations.append(f"position {k}: captured entry has logprob {entry.logprob} > 0")
    return violations

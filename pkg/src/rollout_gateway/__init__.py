"""Rollout-as-a-service for training LLM agents as black boxes.

A rollout server expands tasks into sessions and schedules them onto gateway
nodes. Each gateway runs an unmodified agent harness inside an isolated
runtime, intercepts the harness's model-API traffic through a
provider-compatible proxy, captures token-level completions, and reconstructs
token-faithful trajectories with loss masks, log-probabilities, and rewards.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AgentSpec,
    BuilderSpec,
    CompletionRecord,
    CompletionSession,
    EvaluatorSpec,
    LogprobEntry,
    NodeInfo,
    PrepareAction,
    RuntimeSpec,
    SessionResult,
    SessionSpec,
    TaskRequest,
    Trace,
    Trajectory,
    check_trace,
    expand_task,
    validate_task,
)

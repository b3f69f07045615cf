"""Registry-backed post-run scoring and reward propagation.

Evaluators run in the POSTRUN stage after trajectory construction. They see
the run outcome, the built trajectory, and (when they ask for one) a runtime
to execute commands in; they never mutate captured completions or token data.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Callable, Optional

from .model import Json, Trajectory

log = logging.getLogger(__name__)


class EvaluatorResolutionError(KeyError):
    """Unknown evaluator strategy name."""


def evaluate_session_completion(
    outcome: str,
    trajectory: Optional[Trajectory],
    runtime: Any = None,
    config: Optional[Json] = None,
    budget: float = 60.0,
) -> Json:
    """Reward 1.0 iff the run completed and produced at least one sampled token."""
    started = time.monotonic()
    has_sampled = bool(trajectory) and any(sum(t.loss_mask) >= 1 for t in trajectory.traces)
    reward = 1.0 if outcome == "completed" and has_sampled else 0.0
    return {
        "reward": reward,
        "evaluator": "session_completion",
        "detail": {"outcome": outcome, "sampled_traces": has_sampled},
        "duration": time.monotonic() - started,
    }


def evaluate_test_on_output(
    outcome: str,
    trajectory: Optional[Trajectory],
    runtime: Any = None,
    config: Optional[Json] = None,
    budget: float = 60.0,
) -> Json:
    """Run a configured test command in the runtime; reward 1.0 iff it exits 0."""
    started = time.monotonic()
    config = config or {}
    command = config.get("command")
    detail: Json = {}
    reward = 0.0
    if not command:
        detail["error"] = "test_on_output requires config.command"
    elif runtime is None:
        detail["error"] = "no runtime available for test execution"
    else:
        timeout = float(config.get("timeout", budget))
        try:
            result = runtime.exec(command, timeout=timeout)
            detail.update({"exit_code": result.exit_code, "stdout": result.stdout[-4096:], "stderr": result.stderr[-4096:]})
            if result.timed_out:
                detail["error"] = f"test command exceeded {timeout}s budget"
            elif result.exit_code == 0:
                reward = 1.0
        except Exception as exc:  # noqa: BLE001 - evaluator failures become reward 0 with detail
            detail["error"] = f"exec failed: {exc}"
    return {
        "reward": reward,
        "evaluator": "test_on_output",
        "detail": detail,
        "duration": time.monotonic() - started,
    }


def propagate_reward(
    trajectory: Trajectory,
    report: Json,
    mode: str = "broadcast",
    hook: Optional[Callable[[int, Any], Optional[float]]] = None,
) -> Trajectory:
    """Attach the evaluator's reward to traces.

    broadcast sets every trace's reward to the report reward (idempotent);
    per_trace_hook delegates assignment to a user hook called with
    (trace_index, trace) that returns a reward or None to leave it unset.
    """
    if mode == "broadcast":
        reward = report.get("reward")
        traces = [t.with_reward(reward) for t in trajectory.traces]
    elif mode == "per_trace_hook":
        if hook is None:
            raise ValueError("per_trace_hook mode requires a hook")
        traces = []
        for i, t in enumerate(trajectory.traces):
            value = hook(i, t)
            traces.append(t.with_reward(value) if value is not None else t)
    else:
        raise ValueError(f"unknown reward propagation mode {mode!r}")
    return trajectory.with_traces(traces)


EvaluatorFn = Callable[..., Json]

_REGISTRY: dict[str, EvaluatorFn] = {
    "session_completion": evaluate_session_completion,
    "test_on_output": evaluate_test_on_output,
}


def register_evaluator(name: str, evaluator: EvaluatorFn) -> None:
    _REGISTRY[name] = evaluator


def resolve_evaluator(name: str) -> EvaluatorFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise EvaluatorResolutionError(f"no evaluator named {name!r}") from None


def is_registered(name: str) -> bool:
    return name in _REGISTRY

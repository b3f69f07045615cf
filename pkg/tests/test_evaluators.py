import pytest

from rollout_gateway.builders import build_per_request
from rollout_gateway.evaluators import (
    EvaluatorResolutionError,
    evaluate_session_completion,
    evaluate_test_on_output,
    propagate_reward,
    register_evaluator,
    resolve_evaluator,
)
from rollout_gateway.model import RuntimeSpec, Trajectory
from rollout_gateway.runtime import LocalProcessRuntime

from test_builders import linear_session


@pytest.fixture
def runtime():
    rt = LocalProcessRuntime(RuntimeSpec(workdir="w"), "ev")
    rt.start()
    yield rt
    rt.stop()


def trajectory(n=3):
    return build_per_request(linear_session(n))


class TestSessionCompletion:
    def test_completed_with_traces_scores_one(self):
        report = evaluate_session_completion("completed", trajectory())
        assert report["reward"] == 1.0
        assert report["evaluator"] == "session_completion"

    def test_timeout_scores_zero(self):
        assert evaluate_session_completion("timeout", trajectory())["reward"] == 0.0

    def test_completed_but_empty_trajectory_scores_zero(self):
        empty = Trajectory(session_id="s", traces=[], builder_name="per_request")
        assert evaluate_session_completion("completed", empty)["reward"] == 0.0

    def test_reward_is_binary(self):
        for outcome in ("completed", "timeout", "error", "empty_generation"):
            assert evaluate_session_completion(outcome, trajectory())["reward"] in (0.0, 1.0)


class TestTestOnOutput:
    def test_passing_command(self, runtime):
        report = evaluate_test_on_output("completed", None, runtime=runtime, config={"command": "true"})
        assert report["reward"] == 1.0
        assert report["detail"]["exit_code"] == 0

    def test_failing_command_captures_stderr(self, runtime):
        report = evaluate_test_on_output(
            "completed", None, runtime=runtime, config={"command": "echo nope >&2; exit 2"}
        )
        assert report["reward"] == 0.0
        assert report["detail"]["exit_code"] == 2
        assert "nope" in report["detail"]["stderr"]

    def test_budget_exceeded_scores_zero_with_detail(self, runtime):
        runtime.grace_seconds = 0.2
        report = evaluate_test_on_output(
            "completed", None, runtime=runtime, config={"command": "sleep 20", "timeout": 0.5}
        )
        assert report["reward"] == 0.0
        assert "budget" in report["detail"]["error"]

    def test_missing_command_is_descriptive(self, runtime):
        report = evaluate_test_on_output("completed", None, runtime=runtime, config={})
        assert report["reward"] == 0.0
        assert "command" in report["detail"]["error"]


class TestPropagateReward:
    def test_broadcast_sets_every_trace(self):
        result = propagate_reward(trajectory(3), {"reward": 1.0})
        assert [t.reward for t in result.traces] == [1.0, 1.0, 1.0]

    def test_broadcast_over_empty_trajectory_is_noop(self):
        empty = Trajectory(session_id="s", traces=[], builder_name="per_request")
        assert propagate_reward(empty, {"reward": 1.0}).traces == []

    def test_broadcast_is_idempotent(self):
        once = propagate_reward(trajectory(2), {"reward": 0.5})
        twice = propagate_reward(once, {"reward": 0.5})
        assert once == twice

    def test_per_trace_hook_assigns_selectively(self):
        result = propagate_reward(
            trajectory(3),
            {"reward": 1.0},
            mode="per_trace_hook",
            hook=lambda i, t: 1.0 if i == 2 else None,
        )
        assert [t.reward for t in result.traces] == [None, None, 1.0]

    def test_original_trajectory_is_untouched(self):
        before = trajectory(2)
        propagate_reward(before, {"reward": 1.0})
        assert all(t.reward is None for t in before.traces)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            propagate_reward(trajectory(1), {"reward": 1.0}, mode="mystery")


class TestRegistry:
    def test_builtins(self):
        assert resolve_evaluator("session_completion") is evaluate_session_completion
        assert resolve_evaluator("test_on_output") is evaluate_test_on_output

    def test_unknown(self):
        with pytest.raises(EvaluatorResolutionError):
            resolve_evaluator("agent_judge")

    def test_custom(self):
        register_evaluator("always_half", lambda *a, **k: {"reward": 0.5, "evaluator": "always_half", "detail": {}})
        assert resolve_evaluator("always_half")(None, None)["reward"] == 0.5

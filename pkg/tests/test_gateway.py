import time

import pytest
import requests

from rollout_gateway.gateway import GatewayConfig, GatewayNode
from rollout_gateway.httpd import wait_until
from rollout_gateway.mock_llm import MockLlmService
from rollout_gateway.model import PrepareAction, check_trace

from conftest import make_session_spec


@pytest.fixture
def llm():
    service = MockLlmService().start()
    yield service
    service.stop()


@pytest.fixture
def node(llm):
    gw = GatewayNode(GatewayConfig(inference_url=llm.url, init_pool=2, running_pool=2, postrun_pool=2)).start()
    yield gw
    gw.stop()


def mock_agent_spec(n_calls=3, extra_steps=(), **kwargs):
    steps = [{"type": "call", "message": f"turn {i}"} for i in range(n_calls)]
    steps.extend(extra_steps)
    script = {"system": "gateway-test agent", "steps": steps}
    return make_session_spec(harness_config={"script": script}, **kwargs)


def wait_terminal(node, session_id, timeout=30.0):
    assert wait_until(
        lambda: (node.get_state(session_id) or object()).__dict__.get("stage") == "terminal"
        if node.get_state(session_id)
        else False,
        timeout,
    ), f"session {session_id} did not reach terminal"
    return node.get_state(session_id).result


class TestLifecycle:
    def test_completed_run_captures_and_builds(self, node):
        spec = mock_agent_spec(n_calls=3, session_id="gw-ok")
        accepted, _ = node.create_session(spec)
        assert accepted
        result = wait_terminal(node, "gw-ok")
        assert result.status == "completed"
        assert result.trajectory is not None
        assert result.trajectory.build_diagnostics["completions"] == 3
        assert result.trajectory.build_diagnostics["chains"] == 1
        for trace in result.trajectory.traces:
            assert check_trace(trace) == []
        assert result.evaluator_report["reward"] == 1.0
        assert result.stage_durations["running"] > 0

    def test_timeout_recovers_partial_traces(self, node):
        spec = mock_agent_spec(
            n_calls=2,
            extra_steps=[{"type": "sleep", "seconds": 3600}],
            session_id="gw-timeout",
            timeout_seconds=5.0,
        )
        node.create_session(spec)
        result = wait_terminal(node, "gw-timeout", timeout=40)
        assert result.status == "timeout"
        assert result.trajectory is not None
        assert result.trajectory.build_diagnostics["completions"] == 2
        assert result.evaluator_report["reward"] == 0.0

    def test_zero_call_harness_is_empty_generation(self, node):
        spec = mock_agent_spec(n_calls=0, session_id="gw-empty")
        node.create_session(spec)
        result = wait_terminal(node, "gw-empty")
        assert result.status == "empty_generation"
        assert result.trajectory is None

    def test_prepare_failure_is_terminal_error_without_running(self, node):
        spec = mock_agent_spec(
            n_calls=1,
            session_id="gw-prepfail",
            prepare=[PrepareAction(type="exec", command="echo doomed >&2; exit 9")],
        )
        node.create_session(spec)
        result = wait_terminal(node, "gw-prepfail")
        assert result.status == "error"
        assert "doomed" in result.evaluator_report["detail"]["error"]
        state = node.get_state("gw-prepfail")
        assert "run_start" not in state.stamps

    def test_nonzero_harness_exit_is_error_with_builder_output(self, node):
        spec = mock_agent_spec(n_calls=2, extra_steps=[{"type": "exit", "code": 4}], session_id="gw-exit4")
        node.create_session(spec)
        result = wait_terminal(node, "gw-exit4")
        assert result.status == "error"
        assert result.trajectory is not None  # captures preserved on error
        assert result.trajectory.build_diagnostics["completions"] == 2

    def test_workspaces_are_torn_down(self, node):
        spec = mock_agent_spec(n_calls=1, session_id="gw-clean")
        node.create_session(spec)
        wait_terminal(node, "gw-clean")
        state = node.get_state("gw-clean")
        assert wait_until(lambda: not state.runtime.workspace.exists(), 10)

    def test_no_orphan_workspaces_or_processes_after_a_batch(self, node):
        import subprocess
        import tempfile
        from pathlib import Path

        def runtime_dirs():
            return {p.name for p in Path(tempfile.gettempdir()).glob("rtw-audit-*")}

        before = runtime_dirs()
        for i in range(3):
            spec = mock_agent_spec(n_calls=2, session_id=f"audit-{i}", refresh_runtime=True)
            while not node.create_session(spec)[0]:
                time.sleep(0.05)
        for i in range(3):
            wait_terminal(node, f"audit-{i}")
        assert wait_until(lambda: runtime_dirs() == before, 10), runtime_dirs() - before
        leftover = subprocess.run(
            ["pgrep", "-f", "agent_script.json"], capture_output=True, text=True
        )
        assert leftover.stdout.strip() == ""

    def test_exec_tool_acts_in_the_workspace(self, node):
        spec = mock_agent_spec(
            n_calls=1,
            extra_steps=[{"type": "exec_tool", "command": "echo made > artifact.txt"}, {"type": "call", "message": "done"}],
            session_id="gw-tool",
            evaluator_strategy="test_on_output",
            evaluator_config={"command": "grep -q made artifact.txt"},
        )
        node.create_session(spec)
        result = wait_terminal(node, "gw-tool")
        assert result.status == "completed"
        assert result.evaluator_report["reward"] == 1.0


class TestAdmission:
    def test_duplicate_session_rejected_while_live(self, node):
        spec = mock_agent_spec(n_calls=1, session_id="gw-dup", prepare=[PrepareAction(type="exec", command="sleep 0.5")])
        assert node.create_session(spec)[0]
        accepted, reason = node.create_session(spec)
        assert not accepted and reason == "duplicate"
        wait_terminal(node, "gw-dup")

    def test_terminal_session_can_be_recreated(self, node):
        spec = mock_agent_spec(n_calls=1, session_id="gw-rerun")
        node.create_session(spec)
        wait_terminal(node, "gw-rerun")
        node.registry.delete_session("gw-rerun")
        accepted, _ = node.create_session(mock_agent_spec(n_calls=1, session_id="gw-rerun"))
        assert accepted
        wait_terminal(node, "gw-rerun")

    def test_init_capacity_rejection(self, llm):
        gw = GatewayNode(GatewayConfig(inference_url=llm.url, init_pool=1, running_pool=1, postrun_pool=1)).start()
        try:
            slow_prepare = [PrepareAction(type="exec", command="sleep 1.5")]
            assert gw.create_session(mock_agent_spec(n_calls=0, session_id="cap-1", prepare=slow_prepare))[0]
            accepted, reason = gw.create_session(mock_agent_spec(n_calls=0, session_id="cap-2"))
            assert not accepted and reason == "capacity"
            wait_terminal(gw, "cap-1")
        finally:
            gw.stop()

    def test_occupancy_respects_capacities(self, node):
        for i in range(4):
            node.create_session(mock_agent_spec(n_calls=1, session_id=f"occ-{i}"))
        caps = node.stage_capacities()
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            occ = node.occupancy()
            for stage in ("INIT", "READY", "RUNNING", "POSTRUN"):
                assert occ[stage] <= caps[stage], (occ, caps)
            if all(
                (node.get_state(f"occ-{i}") or object()).__dict__.get("stage") == "terminal"
                if node.get_state(f"occ-{i}")
                else False
                for i in range(4)
            ):
                break
            time.sleep(0.02)


class TestDeleteSession:
    def test_delete_terminal_session(self, node):
        node.create_session(mock_agent_spec(n_calls=1, session_id="gw-del"))
        wait_terminal(node, "gw-del")
        node.delete_session("gw-del")
        assert node.get_state("gw-del") is None
        assert node.registry.get("gw-del") is None

    def test_delete_unknown_is_idempotent(self, node):
        node.delete_session("never-existed")
        node.delete_session("never-existed")

    def test_delete_live_session_cancels(self, node):
        spec = mock_agent_spec(n_calls=1, extra_steps=[{"type": "sleep", "seconds": 3600}], session_id="gw-live")
        node.create_session(spec)
        assert wait_until(lambda: node.registry.completion_count("gw-live") >= 1, 20)
        state = node.get_state("gw-live")
        node.delete_session("gw-live")
        assert node.get_state("gw-live") is None
        assert wait_until(lambda: not (state.runtime and state.runtime.workspace and state.runtime.workspace.exists()), 15)


class TestPrewarm:
    def test_evaluator_runs_in_prewarmed_runtime(self, llm):
        gw = GatewayNode(GatewayConfig(inference_url=llm.url)).start()
        try:
            spec = mock_agent_spec(
                n_calls=1,
                extra_steps=[{"type": "sleep", "seconds": 1.0}],
                session_id="gw-prewarm",
                refresh_runtime=True,
                evaluator_strategy="test_on_output",
                evaluator_config={"command": "test -f seeded.txt"},
                prepare=[PrepareAction(type="exec", command="sleep 0.4; echo x > seeded.txt")],
            )
            gw.create_session(spec)
            result = wait_terminal(gw, "gw-prewarm")
            state = gw.get_state("gw-prewarm")
            # Prewarm began during the agent run, not after it.
            assert state.stamps["prewarm_start"] < state.stamps["run_end"]
            assert state.stamps["prewarm_end"] <= state.stamps["postrun_end"]
            # The test command succeeded against the refreshed runtime's file.
            assert result.evaluator_report["reward"] == 1.0
            # Overlap: total wall time is less than serial init+prewarm+run would be.
            assert result.status == "completed"
        finally:
            gw.stop()


class TestHttpSurface:
    def test_create_get_delete_over_http(self, node):
        spec = mock_agent_spec(n_calls=1, session_id="gw-http")
        resp = requests.post(node.url + "/sessions", json=spec.to_dict(), timeout=10)
        assert resp.status_code == 200
        assert wait_until(
            lambda: requests.get(node.url + "/sessions/gw-http", timeout=10).json().get("stage") == "terminal", 30
        )
        doc = requests.get(node.url + "/sessions/gw-http", timeout=10).json()
        assert doc["result"]["status"] == "completed"
        assert doc["captured_completions"] == 1
        assert requests.delete(node.url + "/sessions/gw-http", timeout=10).status_code == 200
        assert requests.get(node.url + "/sessions/gw-http", timeout=10).status_code == 404

    def test_duplicate_and_capacity_status_codes(self, llm):
        gw = GatewayNode(GatewayConfig(inference_url=llm.url, init_pool=1)).start()
        try:
            spec = mock_agent_spec(
                n_calls=0, session_id="http-cap", prepare=[PrepareAction(type="exec", command="sleep 1")]
            )
            assert requests.post(gw.url + "/sessions", json=spec.to_dict(), timeout=10).status_code == 200
            dup = requests.post(gw.url + "/sessions", json=spec.to_dict(), timeout=10)
            assert dup.status_code == 409
            other = mock_agent_spec(n_calls=0, session_id="http-cap-2")
            assert requests.post(gw.url + "/sessions", json=other.to_dict(), timeout=10).status_code == 429
            wait_terminal(gw, "http-cap")
        finally:
            gw.stop()

    def test_artifact_manifest(self, node):
        spec = mock_agent_spec(
            n_calls=1,
            extra_steps=[{"type": "exec_tool", "command": "printf hello > out.bin"}],
            session_id="gw-artifacts",
            evaluator_config={"artifact_paths": ["workspace/out.bin", "workspace/missing.bin"]},
        )
        node.create_session(spec)
        result = wait_terminal(node, "gw-artifacts")
        manifest = {entry["path"]: entry for entry in result.artifacts}
        assert manifest["workspace/out.bin"]["size"] == 5
        assert "sha256" in manifest["workspace/out.bin"]
        assert "error" in manifest["workspace/missing.bin"]

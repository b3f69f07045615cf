import time

import pytest

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _acceptance_results.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome in sorted(_acceptance_results):
        terminalreporter.write_line(f"{outcome}  {name}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end test")

from rollout_gateway.mock_llm import MockLlmService, Scenario
from rollout_gateway.model import (
    AgentSpec,
    BuilderSpec,
    EvaluatorSpec,
    RuntimeSpec,
    SessionSpec,
)
from rollout_gateway.tokenizer import EOT


@pytest.fixture
def mock_llm():
    service = MockLlmService().start()
    yield service
    service.stop()


def make_scenario(rules=None, default_reply="ok"):
    return Scenario.from_dict({"rules": rules or [], "default_reply": default_reply})


def make_session_spec(
    session_id="sess-1",
    task_id="task-1",
    timeout_seconds=60.0,
    harness="mock_agent",
    harness_config=None,
    builder_strategy="prefix_merging",
    evaluator_strategy="session_completion",
    evaluator_config=None,
    refresh_runtime=False,
    prepare=(),
    metadata=None,
) -> SessionSpec:
    return SessionSpec(
        session_id=session_id,
        task_id=task_id,
        sample_index=0,
        deadline=time.time() + timeout_seconds,
        runtime=RuntimeSpec(backend="local_process", workdir="workspace", prepare=tuple(prepare)),
        agent=AgentSpec(harness=harness, model_name="mock-model", harness_config=harness_config or {}),
        builder=BuilderSpec(strategy=builder_strategy, config={"end_of_turn_token_id": EOT}),
        evaluator=EvaluatorSpec(
            strategy=evaluator_strategy,
            refresh_runtime=refresh_runtime,
            config=evaluator_config or {},
        ),
        metadata=metadata or {},
    )

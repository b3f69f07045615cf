import pytest

from rollout_gateway.builders import group_into_chains
from rollout_gateway.gateway import GatewayConfig, GatewayNode
from rollout_gateway.mock_harness import run_script
from rollout_gateway.mock_llm import MockLlmService, Scenario
from rollout_gateway.providers import PROVIDER_KINDS
from rollout_gateway.tokenizer import EOT

from conftest import make_session_spec

CONFIG = {"end_of_turn_token_id": EOT}


@pytest.fixture
def stack():
    llm = MockLlmService().start()
    node = GatewayNode(GatewayConfig(inference_url=llm.url)).start()
    yield llm, node
    node.stop()
    llm.stop()


def open_session(node, llm, session_id="harness-sess"):
    spec = make_session_spec(session_id=session_id)
    base_url, token = node.registry.issue_credentials(spec, node.url, llm.url)
    return base_url, token


def linear_script(n_calls=3):
    return {
        "system": "agent system",
        "steps": [{"type": "call", "message": f"turn {i}"} for i in range(n_calls)],
    }


FIG3_SCRIPT = {
    "system": "main agent",
    "steps": [
        {"type": "call", "message": "turn 0"},
        {"type": "call", "message": "turn 1"},
        {"type": "call", "message": "turn 2"},
        {"type": "compact", "replacement": "what happened so far"},
        {"type": "call", "message": "continue"},
        {"type": "subagent", "system": "sub agent", "steps": [{"type": "call", "message": "sub task"}]},
    ],
}


class TestRunScript:
    def test_three_linear_calls_form_one_chain(self, stack):
        llm, node = stack
        base_url, token = open_session(node, llm)
        code = run_script(linear_script(3), base_url, token, "mock-model", "openai_chat")
        assert code == 0
        session = node.registry.snapshot_session("harness-sess")
        assert len(session.completions) == 3
        chains = group_into_chains(session, CONFIG)
        assert [c.completion_indices for c in chains] == [[0, 1, 2]]

    def test_fig3_script_yields_five_completions_three_chains(self, stack):
        llm, node = stack
        base_url, token = open_session(node, llm)
        code = run_script(FIG3_SCRIPT, base_url, token, "mock-model", "openai_chat")
        assert code == 0
        session = node.registry.snapshot_session("harness-sess")
        assert len(session.completions) == 5
        chains = group_into_chains(session, CONFIG)
        assert len(chains) == 3
        assert [c.completion_indices for c in chains] == [[0, 1, 2], [3], [4]]

    def test_exit_step_returns_code(self, stack):
        llm, node = stack
        base_url, token = open_session(node, llm)
        script = {"system": "s", "steps": [{"type": "exit", "code": 7}]}
        assert run_script(script, base_url, token, "m", "openai_chat") == 7

    def test_unreachable_proxy_is_nonzero(self):
        code = run_script(linear_script(1), "http://127.0.0.1:1/proxy/x", "t", "m", "openai_chat")
        assert code == 1

    def test_tool_flow(self, stack):
        llm, node = stack
        llm.backend.scenario = Scenario.from_dict(
            {
                "rules": [
                    {
                        "match": {"contains": "list"},
                        "reply": "",
                        "tool_calls": [{"name": "ls", "arguments": {"path": "."}}],
                    },
                    {"match": {"contains": "a.txt"}, "reply": "saw the file"},
                ],
                "default_reply": "ok",
            }
        )
        base_url, token = open_session(node, llm)
        script = {
            "system": "s",
            "steps": [
                {"type": "call", "message": "list the files"},
                {"type": "tool_result", "content": "a.txt"},
                {"type": "call"},
            ],
        }
        assert run_script(script, base_url, token, "m", "openai_chat") == 0
        session = node.registry.snapshot_session("harness-sess")
        assert len(session.completions) == 2
        assert session.completions[0].finish_reason == "tool_calls"
        assert session.completions[1].response_messages[0]["content"] == "saw the file"
        # The tool result became part of the second request's history.
        roles = [m["role"] for m in session.completions[1].request_messages]
        assert "tool" in roles

    def test_concurrent_subagent_interleaves_capture(self, stack):
        llm, node = stack
        base_url, token = open_session(node, llm)
        script = {
            "system": "main",
            "steps": [
                {"type": "call", "message": "t0"},
                {
                    "type": "subagent",
                    "system": "sub",
                    "concurrent": True,
                    "steps": [{"type": "call", "message": "s0"}, {"type": "call", "message": "s1"}],
                },
                {"type": "call", "message": "t1"},
                {"type": "call", "message": "t2"},
            ],
        }
        assert run_script(script, base_url, token, "m", "openai_chat") == 0
        session = node.registry.snapshot_session("harness-sess")
        assert len(session.completions) == 5
        chains = group_into_chains(session, CONFIG)
        assert len(chains) == 2
        sizes = sorted(len(c.completion_indices) for c in chains)
        assert sizes == [2, 3]


class TestProviderTransparency:
    def test_same_script_identical_tokens_across_providers(self, stack):
        llm, node = stack
        captured = {}
        for kind in PROVIDER_KINDS:
            sid = f"prov-{kind}"
            base_url, token = open_session(node, llm, sid)
            assert run_script(linear_script(2), base_url, token, "mock-model", kind) == 0
            session = node.registry.snapshot_session(sid)
            captured[kind] = [(c.prompt_token_ids, c.response_token_ids) for c in session.completions]
        reference = captured[PROVIDER_KINDS[0]]
        for kind, tokens in captured.items():
            assert tokens == reference, f"{kind} diverged"

    @pytest.mark.parametrize("kind", PROVIDER_KINDS)
    def test_streamed_and_plain_runs_capture_identically(self, stack, kind):
        llm, node = stack
        records = {}
        for mode, stream in (("plain", False), ("stream", True)):
            sid = f"{kind}-{mode}"
            base_url, token = open_session(node, llm, sid)
            assert run_script(linear_script(2), base_url, token, "mock-model", kind, stream=stream) == 0
            session = node.registry.snapshot_session(sid)
            records[mode] = [
                (c.prompt_token_ids, c.response_token_ids, [e.logprob for e in c.response_logprobs], c.finish_reason)
                for c in session.completions
            ]
        assert records["plain"] == records["stream"]

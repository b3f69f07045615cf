import json

import pytest

from rollout_gateway.harness import (
    HarnessResolutionError,
    prepare_mock_agent,
    prepare_shell,
    register_harness,
    resolve_harness,
)
from rollout_gateway.model import RuntimeSpec
from rollout_gateway.runtime import LocalProcessRuntime

from conftest import make_session_spec


@pytest.fixture
def runtime():
    rt = LocalProcessRuntime(RuntimeSpec(workdir="workspace"), "h-sess")
    rt.start()
    yield rt
    rt.stop()


BASE_URL = "http://127.0.0.1:7000/proxy/h-sess"
TOKEN = "tok-abc"


class TestShellAdapter:
    def test_substitutes_placeholders_and_exports_env(self, runtime):
        spec = make_session_spec(
            harness="shell",
            harness_config={"command": "agent --endpoint {base_url} --key {api_key} --model {model_name}"},
        )
        launch = prepare_shell(spec, runtime, BASE_URL, TOKEN)
        assert launch.commands == [f"agent --endpoint {BASE_URL} --key {TOKEN} --model mock-model"]
        assert launch.env == {
            "MODEL_BASE_URL": BASE_URL,
            "MODEL_API_KEY": TOKEN,
            "MODEL_NAME": "mock-model",
        }

    def test_multiple_commands(self, runtime):
        spec = make_session_spec(harness="shell", harness_config={"commands": ["prep", "run {model_name}"]})
        launch = prepare_shell(spec, runtime, BASE_URL, TOKEN)
        assert launch.commands == ["prep", "run mock-model"]

    def test_missing_command_is_an_error(self, runtime):
        spec = make_session_spec(harness="shell", harness_config={})
        with pytest.raises(ValueError, match="command"):
            prepare_shell(spec, runtime, BASE_URL, TOKEN)

    def test_env_contract_reaches_the_process(self, runtime):
        spec = make_session_spec(harness="shell", harness_config={"command": "echo $MODEL_BASE_URL"})
        launch = prepare_shell(spec, runtime, BASE_URL, TOKEN)
        result = runtime.exec(launch.commands[0], env=launch.env)
        assert result.stdout.strip() == BASE_URL


class TestMockAgentAdapter:
    def test_installs_script_and_builds_command(self, runtime):
        script = {"system": "s", "steps": [{"type": "call", "message": "hi"}]}
        spec = make_session_spec(harness_config={"script": script, "provider": "anthropic_messages"})
        launch = prepare_mock_agent(spec, runtime, BASE_URL, TOKEN)
        installed = json.loads(runtime.download("workspace/agent_script.json"))
        assert installed == script
        assert "rollout_gateway.mock_harness" in launch.commands[0]
        assert "--provider anthropic_messages" in launch.commands[0]
        assert launch.env["MODEL_API_KEY"] == TOKEN

    def test_script_path_loading(self, runtime, tmp_path):
        script = {"steps": []}
        path = tmp_path / "script.json"
        path.write_text(json.dumps(script))
        spec = make_session_spec(harness_config={"script_path": str(path)})
        launch = prepare_mock_agent(spec, runtime, BASE_URL, TOKEN)
        assert json.loads(runtime.download("workspace/agent_script.json")) == script
        assert launch.commands

    def test_stream_flag(self, runtime):
        spec = make_session_spec(harness_config={"script": {"steps": []}, "stream": True})
        launch = prepare_mock_agent(spec, runtime, BASE_URL, TOKEN)
        assert "--stream" in launch.commands[0]

    def test_missing_script_is_an_error(self, runtime):
        spec = make_session_spec(harness_config={})
        with pytest.raises(ValueError, match="script"):
            prepare_mock_agent(spec, runtime, BASE_URL, TOKEN)


class TestRegistry:
    def test_builtin_adapters(self):
        assert resolve_harness("shell") is prepare_shell
        assert resolve_harness("mock_agent") is prepare_mock_agent

    def test_unknown_adapter(self):
        with pytest.raises(HarnessResolutionError):
            resolve_harness("claude_code")  # named product harnesses are not bundled

    def test_custom_registration(self):
        register_harness("custom", prepare_shell)
        assert resolve_harness("custom") is prepare_shell

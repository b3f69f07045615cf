"""Harness adapters: install configuration and return the commands that run the agent.

An adapter is deliberately small. It may write config files into the runtime
and must return shell commands plus environment variables; the gateway runs
those commands and never looks inside the harness. The environment contract
is MODEL_BASE_URL / MODEL_API_KEY / MODEL_NAME pointing at the session's
proxy credentials.

Two adapters ship here: a generic ``shell`` wrapper for arbitrary agent
executables, and ``mock_agent``, which launches the scripted black-box client
used for desk-scale verification.
"""

from __future__ import annotations

import json
import logging
import shlex
import sys
from dataclasses import dataclass, field
from typing import Callable

from .model import SessionSpec
from .runtime import Runtime

log = logging.getLogger(__name__)


class HarnessResolutionError(KeyError):
    """Unknown harness adapter name."""


@dataclass
class HarnessLaunch:
    commands: list[str]
    env: dict[str, str] = field(default_factory=dict)


def _model_env(base_url: str, token: str, model_name: str) -> dict[str, str]:
    return {
        "MODEL_BASE_URL": base_url,
        "MODEL_API_KEY": token,
        "MODEL_NAME": model_name,
    }


def prepare_shell(spec: SessionSpec, runtime: Runtime, base_url: str, token: str) -> HarnessLaunch:
    """Wrap an arbitrary agent executable.

    harness_config.command (or .commands) gives the shell command template;
    the placeholders {base_url}, {api_key}, {model_name} are substituted
    literally, and the proxy coordinates are also exported as env vars.
    """
    config = spec.agent.harness_config
    raw_commands = config.get("commands")
    if raw_commands is None:
        command = config.get("command")
        if not command:
            raise ValueError("shell harness requires harness_config.command")
        raw_commands = [command]
    commands = []
    for command in raw_commands:
        command = command.replace("{base_url}", base_url)
        command = command.replace("{api_key}", token)
        command = command.replace("{model_name}", spec.agent.model_name)
        commands.append(command)
    return HarnessLaunch(commands=commands, env=_model_env(base_url, token, spec.agent.model_name))


def prepare_mock_agent(spec: SessionSpec, runtime: Runtime, base_url: str, token: str) -> HarnessLaunch:
    """Install the scripted agent's script file and launch it as a black box."""
    config = spec.agent.harness_config
    script = config.get("script")
    if script is None and config.get("script_path"):
        with open(config["script_path"], encoding="utf-8") as fh:
            script = json.load(fh)
    if script is None:
        raise ValueError("mock_agent harness requires harness_config.script or .script_path")
    # Commands execute with cwd at the spec workdir, so install the script there.
    script_dest = spec.runtime.workdir.rstrip("/") + "/agent_script.json"
    runtime.upload(json.dumps(script, sort_keys=True).encode("utf-8"), script_dest)
    provider = config.get("provider", "openai_chat")
    command = f"{shlex.quote(sys.executable)} -m rollout_gateway.mock_harness --script agent_script.json --provider {shlex.quote(provider)}"
    if config.get("stream"):
        command += " --stream"
    return HarnessLaunch(commands=[command], env=_model_env(base_url, token, spec.agent.model_name))


AdapterFn = Callable[[SessionSpec, Runtime, str, str], HarnessLaunch]

_REGISTRY: dict[str, AdapterFn] = {
    "shell": prepare_shell,
    "mock_agent": prepare_mock_agent,
}


def register_harness(name: str, adapter: AdapterFn) -> None:
    _REGISTRY[name] = adapter


def resolve_harness(name: str) -> AdapterFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise HarnessResolutionError(f"no harness adapter named {name!r}") from None


def is_registered(name: str) -> bool:
    return name in _REGISTRY

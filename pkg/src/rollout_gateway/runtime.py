"""Runtime interface: start/stop/exec/upload/download/cancel behind one contract.

The local-process backend runs commands in a per-session temporary workspace
with a scrubbed environment - no container required at desk scale. Docker and
Apptainer backends are declared as extension points behind the same interface
so a task can change isolation backend without touching gateway code.
"""

from __future__ import annotations

import logging
import os
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .model import RuntimeSpec

log = logging.getLogger(__name__)


class RuntimeError_(Exception):
    """Runtime lifecycle violation (exec before start, failed prepare, ...)."""


class RuntimeUnavailableError(RuntimeError_):
    """The requested backend is declared but not implemented in this build."""


@dataclass
class ExecResult:
    exit_code: int
    stdout: str
    stderr: str
    timed_out: bool = False
    duration: float = 0.0


class Runtime(ABC):
    """Common lifecycle for isolation backends."""

    @abstractmethod
    def start(self) -> None: ...

    @abstractmethod
    def stop(self) -> None: ...

    @abstractmethod
    def exec(self, command: str, timeout: Optional[float] = None, env: Optional[dict[str, str]] = None) -> ExecResult: ...

    @abstractmethod
    def upload(self, source: Union[str, bytes], dest: str) -> None: ...

    @abstractmethod
    def download(self, path: str) -> bytes: ...

    @abstractmethod
    def cancel(self) -> None: ...


class LocalProcessRuntime(Runtime):
    """Commands run as local subprocesses inside a throwaway workspace."""

    grace_seconds = 5.0

    def __init__(self, spec: RuntimeSpec, session_id: str = "session") -> None:
        self.spec = spec
        self.session_id = session_id
        self.workspace: Optional[Path] = None
        self.workdir: Optional[Path] = None
        self._started = False
        self._cancelled = False
        self._proc_lock = threading.Lock()
        self._current: Optional[subprocess.Popen] = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self.workspace = Path(tempfile.mkdtemp(prefix=f"rtw-{self.session_id[:24]}-"))
        self.workdir = self._resolve(self.spec.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._started = True

    def stop(self) -> None:
        self.cancel()
        self._started = False
        if self.workspace and self.workspace.exists():
            shutil.rmtree(self.workspace, ignore_errors=True)

    def cancel(self) -> None:
        self._cancelled = True
        with self._proc_lock:
            proc = self._current
        if proc is not None and proc.poll() is None:
            self._kill_tree(proc)

    # -- operations ---------------------------------------------------------

    def exec(self, command: str, timeout: Optional[float] = None, env: Optional[dict[str, str]] = None) -> ExecResult:
        self._require_started()
        started = time.monotonic()
        full_env = self._environment(env)
        proc = subprocess.Popen(
            ["/bin/sh", "-c", command],
            cwd=str(self.workdir),
            env=full_env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,  # own process group, so cancellation kills the tree
        )
        with self._proc_lock:
            self._current = proc
        timed_out = False
        try:
            stdout, stderr = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            self._kill_tree(proc)
            stdout, stderr = proc.communicate()
        finally:
            with self._proc_lock:
                self._current = None
        return ExecResult(
            exit_code=proc.returncode if proc.returncode is not None else -1,
            stdout=(stdout or b"").decode("utf-8", errors="replace"),
            stderr=(stderr or b"").decode("utf-8", errors="replace"),
            timed_out=timed_out,
            duration=time.monotonic() - started,
        )

    def upload(self, source: Union[str, bytes], dest: str) -> None:
        self._require_started()
        target = self._resolve(dest)
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(source, bytes):
            target.write_bytes(source)
        else:
            shutil.copyfile(source, target)

    def download(self, path: str) -> bytes:
        self._require_started()
        return self._resolve(path).read_bytes()

    # -- helpers ------------------------------------------------------------

    def _require_started(self) -> None:
        if not self._started:
            raise RuntimeError_("runtime is not started")

    def _resolve(self, path: str) -> Path:
        assert self.workspace is not None
        return self.workspace / Path(path.lstrip("/"))

    def _environment(self, extra: Optional[dict[str, str]]) -> dict[str, str]:
        # Scrubbed base environment plus the spec's env plus per-exec overrides.
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(self.workspace),
            "LANG": os.environ.get("LANG", "C.UTF-8"),
            "PYTHONUNBUFFERED": "1",
        }
        if os.environ.get("PYTHONPATH"):
            env["PYTHONPATH"] = os.environ["PYTHONPATH"]
        env.update(self.spec.env)
        env.update(extra or {})
        return env

    def _kill_tree(self, proc: subprocess.Popen) -> None:
        try:
            pgid = os.getpgid(proc.pid)
        except ProcessLookupError:
            return
        try:
            os.killpg(pgid, signal.SIGTERM)
        except ProcessLookupError:
            return
        deadline = time.monotonic() + self.grace_seconds
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                return
            time.sleep(0.05)
        try:
            os.killpg(pgid, signal.SIGKILL)
        except ProcessLookupError:
            pass


class _StubRuntime(Runtime):
    """Placeholder for container backends; declared but not shipped here."""

    backend = "stub"

    def __init__(self, spec: RuntimeSpec, session_id: str = "session") -> None:
        self.spec = spec
        self.session_id = session_id

    def start(self) -> None:
        raise RuntimeUnavailableError(f"{self.backend} backend is a documented extension point, not implemented")

    def stop(self) -> None:  # pragma: no cover - stubs never start
        pass

    def exec(self, command, timeout=None, env=None):  # pragma: no cover
        raise RuntimeUnavailableError(self.backend)

    def upload(self, source, dest):  # pragma: no cover
        raise RuntimeUnavailableError(self.backend)

    def download(self, path):  # pragma: no cover
        raise RuntimeUnavailableError(self.backend)

    def cancel(self) -> None:  # pragma: no cover
        pass


class DockerRuntime(_StubRuntime):
    backend = "docker"


class ApptainerRuntime(_StubRuntime):
    backend = "apptainer"


_BACKENDS = {
    "local_process": LocalProcessRuntime,
    "docker": DockerRuntime,
    "apptainer": ApptainerRuntime,
}


def create_runtime(spec: RuntimeSpec, session_id: str = "session") -> Runtime:
    try:
        cls = _BACKENDS[spec.backend]
    except KeyError:
        raise RuntimeError_(f"unknown runtime backend {spec.backend!r}") from None
    return cls(spec, session_id)


def run_prepare_actions(runtime: Runtime, spec: RuntimeSpec, deadline: Optional[float] = None) -> list[ExecResult]:
    """Execute prepare actions in order; raises on the first failure."""
    results = []
    for index, action in enumerate(spec.prepare):
        remaining = None if deadline is None else max(0.1, deadline - time.time())
        if action.type == "exec":
            result = runtime.exec(action.command or "", timeout=remaining)
            results.append(result)
            if result.timed_out:
                raise RuntimeError_(f"prepare action {index} timed out: {action.command!r}")
            if result.exit_code != 0:
                raise RuntimeError_(
                    f"prepare action {index} failed (exit {result.exit_code}): {result.stderr.strip() or result.stdout.strip()}"
                )
        elif action.type == "upload":
            runtime.upload(action.source or "", action.dest or "")
        else:
            raise RuntimeError_(f"prepare action {index}: unknown type {action.type!r}")
    return results

"""Persistent, isolated execution sessions for generated code.

A session is a stateful namespace that survives across executions. The
production implementation supervises an external executor child process and
speaks a line-framed JSON protocol over its stdio:

    request  {"id": <int>, "op": "exec", "code": <string>}
             {"id": <int>, "op": "ping"}
    response {"id": <int>, "status": "ok"|"error", "stdout": <string>,
              "stderr": <string>, "error": <string|null>, "duration_ms": <int>}

one JSON object per line, UTF-8, LF. The supervisor owns kill/restart: the
executor never reports timeouts, it simply stops answering and gets killed.

``InProcessSession`` implements the same contract inside the current process
for deterministic tests and pure-replay runs. It serializes executions
process-wide (stdout capture swaps sys.stdout) and cannot hard-kill hostile
code; anything untrusted belongs in a subprocess session.
"""

from __future__ import annotations

import contextlib
import ctypes
import io
import itertools
import json
import logging
import queue
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .textutil import truncate_middle

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_RUNTIME_ERROR = "runtime_error"
STATUS_TIMEOUT = "timeout"
STATUS_SESSION_DEAD = "session_dead"

STATE_LIVE = "live"
STATE_DEAD = "dead"

DEFAULT_EXECUTOR_CMD = (sys.executable, "-m", "linekernel")


class SpawnError(Exception):
    """The executor child could not be started or failed the handshake."""


class _FramingViolation(Exception):
    """The executor broke the wire protocol; the session is unusable."""


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    stdout: str = ""
    stderr: str = ""
    error_summary: str | None = None
    duration_ms: int = 0

    def __post_init__(self) -> None:
        if self.status not in (STATUS_OK, STATUS_RUNTIME_ERROR, STATUS_TIMEOUT, STATUS_SESSION_DEAD):
            raise ValueError(f"unknown execution status: {self.status!r}")
        if self.status == STATUS_OK and self.error_summary is not None:
            raise ValueError("a successful result cannot carry an error summary")

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "error_summary": self.error_summary,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutionResult":
        return cls(
            status=data["status"],
            stdout=data.get("stdout", ""),
            stderr=data.get("stderr", ""),
            error_summary=data.get("error_summary"),
            duration_ms=int(data.get("duration_ms", 0)),
        )


@dataclass
class SessionConfig:
    kind: str = "subprocess"  # "subprocess" | "inprocess"
    executor_cmd: tuple[str, ...] = DEFAULT_EXECUTOR_CMD
    work_dir: Path | None = None
    startup_deadline_ms: int = 10_000
    grace_ms: int = 500
    capture_budget_chars: int = 65_536


class Session(Protocol):
    id: str
    state: str
    executions_count: int

    def execute(self, code: str, timeout_ms: int) -> ExecutionResult: ...

    def ping(self, timeout_ms: int = 2_000) -> bool: ...

    def reset(self) -> "Session": ...

    def close(self) -> None: ...


def start_session(config: SessionConfig) -> Session:
    """Start a live session; an immediate no-op roundtrip must succeed."""
    if config.kind == "inprocess":
        return InProcessSession(config)
    if config.kind == "subprocess":
        return SubprocessSession(config)
    raise ValueError(f"unknown session kind: {config.kind!r}")


def _new_session_id() -> str:
    return f"sess-{uuid.uuid4().hex[:12]}"


class SubprocessSession:
    """Supervises one executor child process; one in-flight request at a time.

    A timeout kills the child and leaves the handle dead; restarting is the
    caller's choice via reset(). Protocol violations (garbage lines, id
    mismatches, unexpected EOF) are treated as session death, never a hang.
    """

    def __init__(self, config: SessionConfig):
        self._config = config
        self.id = _new_session_id()
        self.state = STATE_DEAD
        self.executions_count = 0
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._req_ids = itertools.count(1)
        self._spawn()

    # -- lifecycle ----------------------------------------------------------

    def _spawn(self) -> None:
        work_dir = self._session_work_dir()
        try:
            proc = subprocess.Popen(
                list(self._config.executor_cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                cwd=str(work_dir) if work_dir else None,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise SpawnError(f"cannot start executor {self._config.executor_cmd!r}: {exc}") from exc
        self._proc = proc
        self._lines = queue.Queue()
        reader = threading.Thread(target=self._pump, args=(proc, self._lines), daemon=True)
        reader.start()
        self.state = STATE_LIVE
        if not self.ping(timeout_ms=self._config.startup_deadline_ms):
            self._kill()
            raise SpawnError("executor failed the protocol handshake")

    def _session_work_dir(self) -> Path | None:
        if self._config.work_dir is None:
            return None
        path = Path(self._config.work_dir) / self.id
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue) -> None:
        try:
            assert proc.stdout is not None
            for line in proc.stdout:
                lines.put(line)
        except ValueError:
            pass
        lines.put(None)  # EOF sentinel

    def _kill(self) -> None:
        proc = self._proc
        if proc is not None and proc.poll() is None:
            proc.kill()
            try:
                proc.wait(timeout=self._config.grace_ms / 1000.0)
            except subprocess.TimeoutExpired:
                log.warning("executor %s did not exit after SIGKILL within grace", self.id)
        self.state = STATE_DEAD

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            self.state = STATE_DEAD
            return
        if proc.poll() is None:
            with contextlib.suppress(OSError):
                if proc.stdin is not None:
                    proc.stdin.close()
            try:
                proc.wait(timeout=self._config.grace_ms / 1000.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                with contextlib.suppress(subprocess.TimeoutExpired):
                    proc.wait(timeout=self._config.grace_ms / 1000.0)
        self.state = STATE_DEAD

    def reset(self) -> "SubprocessSession":
        """Terminate the child (kill after grace) and spawn a fresh namespace."""
        self.close()
        self.id = _new_session_id()
        self._req_ids = itertools.count(1)
        self.executions_count = 0
        self._spawn()
        return self

    # -- protocol -----------------------------------------------------------

    def _send(self, payload: dict) -> bool:
        proc = self._proc
        if proc is None or proc.stdin is None:
            return False
        try:
            proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
            proc.stdin.flush()
            return True
        except (OSError, ValueError):
            return False

    def _await_reply(self, request_id: int, deadline: float) -> dict | None:
        """Return the matching response, None on timeout; raise on violations."""
        assert self._lines is not None
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                return None
            if line is None:
                raise _FramingViolation("executor closed its output stream")
            try:
                message = json.loads(line)
            except json.JSONDecodeError:
                raise _FramingViolation(f"non-JSON protocol line: {line!r}")
            if not isinstance(message, dict) or message.get("id") != request_id:
                raise _FramingViolation(f"response does not match request id {request_id}: {message!r}")
            return message

    def ping(self, timeout_ms: int = 2_000) -> bool:
        if self.state != STATE_LIVE:
            return False
        request_id = next(self._req_ids)
        if not self._send({"id": request_id, "op": "ping"}):
            self._kill()
            return False
        try:
            reply = self._await_reply(request_id, time.monotonic() + timeout_ms / 1000.0)
        except _FramingViolation:
            self._kill()
            return False
        if reply is None or reply.get("status") != "ok":
            self._kill()
            return False
        return True

    def execute(self, code: str, timeout_ms: int) -> ExecutionResult:
        if not code:
            raise ValueError("code must not be empty")
        self.executions_count += 1
        if self.state != STATE_LIVE:
            return ExecutionResult(status=STATUS_SESSION_DEAD, error_summary="session is dead")
        request_id = next(self._req_ids)
        started = time.monotonic()
        if not self._send({"id": request_id, "op": "exec", "code": code}):
            self._kill()
            return ExecutionResult(status=STATUS_SESSION_DEAD, error_summary="executor stdin closed")
        try:
            reply = self._await_reply(request_id, started + timeout_ms / 1000.0)
        except _FramingViolation as exc:
            elapsed_ms = int((time.monotonic() - started) * 1000)
            self._kill()
            return ExecutionResult(
                status=STATUS_SESSION_DEAD, error_summary=str(exc), duration_ms=elapsed_ms
            )
        if reply is None:
            self._kill()
            elapsed_ms = max(int((time.monotonic() - started) * 1000), timeout_ms)
            return ExecutionResult(
                status=STATUS_TIMEOUT,
                error_summary=f"Timeout: no result within {timeout_ms} ms",
                duration_ms=elapsed_ms,
            )
        budget = self._config.capture_budget_chars
        stdout = truncate_middle(str(reply.get("stdout", "")), budget)
        stderr = truncate_middle(str(reply.get("stderr", "")), budget)
        duration_ms = int(reply.get("duration_ms", 0))
        if reply.get("status") == "ok":
            return ExecutionResult(status=STATUS_OK, stdout=stdout, stderr=stderr, duration_ms=duration_ms)
        return ExecutionResult(
            status=STATUS_RUNTIME_ERROR,
            stdout=stdout,
            stderr=stderr,
            error_summary=str(reply.get("error") or "unknown error"),
            duration_ms=duration_ms,
        )


def _async_stop_thread(thread: threading.Thread) -> None:
    """Best-effort stop of a runaway worker by raising SystemExit inside it.

    Takes effect at the next bytecode boundary, so pure-Python busy loops
    stop promptly; a thread blocked inside a C call only dies once the call
    returns. Either way the caller has already reported a timeout.
    """
    if thread.ident is None:
        return
    ctypes.pythonapi.PyThreadState_SetAsyncExc(
        ctypes.c_ulong(thread.ident), ctypes.py_object(SystemExit)
    )


class InProcessSession:
    """Executes code in an in-process namespace behind the session contract.

    Executions run on a worker thread so timeouts can be observed; a timed
    out worker gets a best-effort async stop and the session goes dead,
    mirroring the subprocess contract.
    """

    _exec_lock = threading.Lock()

    def __init__(self, config: SessionConfig | None = None):
        self._config = config or SessionConfig(kind="inprocess")
        self.id = _new_session_id()
        self.state = STATE_LIVE
        self.executions_count = 0
        self._namespace: dict = {"__name__": "__main__"}

    def ping(self, timeout_ms: int = 2_000) -> bool:
        return self.state == STATE_LIVE

    def execute(self, code: str, timeout_ms: int) -> ExecutionResult:
        if not code:
            raise ValueError("code must not be empty")
        self.executions_count += 1
        if self.state != STATE_LIVE:
            return ExecutionResult(status=STATUS_SESSION_DEAD, error_summary="session is dead")

        out_buf, err_buf = io.StringIO(), io.StringIO()
        failure: list[BaseException] = []

        def run() -> None:
            try:
                exec(compile(code, "<session>", "exec"), self._namespace)
            except BaseException as exc:  # user code must not take the harness down
                failure.append(exc)

        started = time.monotonic()
        if not self._exec_lock.acquire(timeout=timeout_ms / 1000.0):
            self.state = STATE_DEAD
            return ExecutionResult(
                status=STATUS_SESSION_DEAD,
                error_summary="in-process executor is wedged by an abandoned execution",
            )
        try:
            with contextlib.redirect_stdout(out_buf), contextlib.redirect_stderr(err_buf):
                worker = threading.Thread(target=run, daemon=True)
                worker.start()
                worker.join(timeout=timeout_ms / 1000.0)
                timed_out = worker.is_alive()
        finally:
            self._exec_lock.release()
        elapsed_ms = int((time.monotonic() - started) * 1000)

        budget = self._config.capture_budget_chars
        stdout = truncate_middle(out_buf.getvalue(), budget)
        stderr = truncate_middle(err_buf.getvalue(), budget)
        if timed_out:
            _async_stop_thread(worker)
            self.state = STATE_DEAD
            return ExecutionResult(
                status=STATUS_TIMEOUT,
                stdout=stdout,
                stderr=stderr,
                error_summary=f"Timeout: no result within {timeout_ms} ms",
                duration_ms=max(elapsed_ms, timeout_ms),
            )
        if failure:
            exc = failure[0]
            message = str(exc)
            summary = f"{type(exc).__name__}: {message}" if message else type(exc).__name__
            return ExecutionResult(
                status=STATUS_RUNTIME_ERROR,
                stdout=stdout,
                stderr=stderr,
                error_summary=summary,
                duration_ms=elapsed_ms,
            )
        return ExecutionResult(status=STATUS_OK, stdout=stdout, stderr=stderr, duration_ms=elapsed_ms)

    def reset(self) -> "InProcessSession":
        self.id = _new_session_id()
        self.state = STATE_LIVE
        self.executions_count = 0
        self._namespace = {"__name__": "__main__"}
        return self

    def close(self) -> None:
        self.state = STATE_DEAD

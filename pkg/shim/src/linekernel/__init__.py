"""A persistent Python execution kernel speaking line-framed JSON over stdio.

The kernel owns one namespace that survives across requests, so state built
by one execution is visible to the next, like a notebook cell sequence.

Wire protocol (one JSON object per line, UTF-8, LF):

    request  {"id": <int>, "op": "exec", "code": <string>}
             {"id": <int>, "op": "ping"}
    response {"id": <int>, "status": "ok"|"error", "stdout": <string>,
              "stderr": <string>, "error": <string|null>, "duration_ms": <int>}

Two rules keep the protocol channel clean: the kernel's real stdout is
duplicated away at startup and fd 1 is pointed at /dev/null, so nothing but
protocol frames ever reaches the supervisor; and user code runs with
sys.stdout/sys.stderr redirected into in-memory buffers whose contents come
back in the response fields. No submitted code can terminate the serve loop
short of the host killing the process: all exceptions, including SystemExit
and KeyboardInterrupt raised by user code, become error responses.
"""

from __future__ import annotations

import io
import json
import os
import sys
import time
from contextlib import redirect_stderr, redirect_stdout

__version__ = "0.1.0"


def _summarize(exc: BaseException) -> str:
    message = str(exc)
    name = type(exc).__name__
    return f"{name}: {message}" if message else name


def _clean(text: str) -> str:
    # Guard against unencodable junk (lone surrogates) breaking a response.
    return text.encode("utf-8", "replace").decode("utf-8")


class Kernel:
    def __init__(self, protocol_out):
        self._out = protocol_out
        self._namespace: dict = {"__name__": "__main__"}

    def respond(
        self,
        request_id: int,
        status: str,
        stdout: str = "",
        stderr: str = "",
        error: str | None = None,
        duration_ms: int = 0,
    ) -> None:
        payload = {
            "id": request_id,
            "status": status,
            "stdout": _clean(stdout),
            "stderr": _clean(stderr),
            "error": _clean(error) if error is not None else None,
            "duration_ms": duration_ms,
        }
        self._out.write(json.dumps(payload, ensure_ascii=False) + "\n")
        self._out.flush()

    def execute(self, request_id: int, code: str) -> None:
        out_buf, err_buf = io.StringIO(), io.StringIO()
        stdin_guard = io.StringIO()  # input() must not eat protocol lines
        saved_stdin = sys.stdin
        error: str | None = None
        started = time.perf_counter()
        try:
            sys.stdin = stdin_guard
            with redirect_stdout(out_buf), redirect_stderr(err_buf):
                exec(compile(code, "<session>", "exec"), self._namespace)
        except BaseException as exc:  # user code must never kill the serve loop
            error = _summarize(exc)
        finally:
            sys.stdin = saved_stdin
        duration_ms = int((time.perf_counter() - started) * 1000)
        status = "ok" if error is None else "error"
        self.respond(request_id, status, out_buf.getvalue(), err_buf.getvalue(), error, duration_ms)

    def handle_line(self, line: str) -> None:
        request_id = -1
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise TypeError("request must be a JSON object")
            request_id = int(request.get("id", -1))
            op = request.get("op")
        except (ValueError, TypeError):
            self.respond(-1, "error", error="malformed request line")
            return
        if op == "ping":
            self.respond(request_id, "ok")
        elif op == "exec":
            code = request.get("code")
            if not isinstance(code, str) or not code:
                self.respond(request_id, "error", error="exec request has no code")
            else:
                self.execute(request_id, code)
        else:
            self.respond(request_id, "error", error=f"unknown op: {op!r}")

    def serve_forever(self, lines) -> None:
        for line in lines:
            if line.strip():
                self.handle_line(line)


def main() -> int:
    # Claim the real stdout for the protocol, then point fd 1 at /dev/null so
    # stray writes (including from subprocesses of user code) cannot corrupt
    # the channel.
    protocol_out = os.fdopen(os.dup(sys.stdout.fileno()), "w", encoding="utf-8", newline="\n")
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, sys.stdout.fileno())
    os.close(devnull)

    kernel = Kernel(protocol_out)
    kernel.serve_forever(sys.stdin)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Single-shot execution harness speaking one JSON frame over stdio.

Reads one input frame ``{code, timeout_ms, memory_limit_mb,
stdout_limit_bytes, stdin}`` (all but ``code`` optional) from stdin, runs the
payload in this interpreter inside a scratch working directory under native
resource limits, and writes exactly one single-line JSON result frame
``{stdout, stderr, exit_status, truncated}`` to the original stdout.

The result descriptor is duplicated before the payload runs and the payload's
standard streams are redirected to capture files, so ordinary payload output
can never appear on the frame stream.  The frame is written only after the
payload has finished.  Timeouts are raised in-process from a wall-clock
alarm (exit_status 124); an RLIMIT_CPU backstop covers payloads that block
outside the interpreter.  The harness exits 0 whenever it produced a result
frame and 2 with a diagnostic on stderr when the input frame is malformed.
"""

from __future__ import annotations

import io
import json
import os
import resource
import shutil
import signal
import sys
import tempfile
import traceback
from typing import Any

TIMEOUT_EXIT_STATUS = 124

DEFAULTS = {
    "timeout_ms": 5000,
    "memory_limit_mb": 512,
    "stdout_limit_bytes": 65536,
    "stdin": "",
}


class MalformedFrame(ValueError):
    pass


class _PayloadTimeout(BaseException):
    """Raised by the alarm handler; BaseException so ``except Exception``
    in the payload cannot swallow it."""


def parse_frame(raw: str) -> dict[str, Any]:
    try:
        body = json.loads(raw)
    except ValueError as exc:
        raise MalformedFrame(f"input frame is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise MalformedFrame("input frame must be a JSON object")
    if not isinstance(body.get("code"), str):
        raise MalformedFrame("frame field 'code' must be a string")
    frame = dict(DEFAULTS)
    frame["code"] = body["code"]
    for key in ("timeout_ms", "memory_limit_mb", "stdout_limit_bytes"):
        if key in body:
            value = body[key]
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise MalformedFrame(f"frame field {key!r} must be a positive integer")
            frame[key] = value
    if "stdin" in body:
        if not isinstance(body["stdin"], str):
            raise MalformedFrame("frame field 'stdin' must be a string")
        frame["stdin"] = body["stdin"]
    return frame


def _apply_limits(memory_limit_mb: int, timeout_ms: int, stdout_limit_bytes: int) -> None:
    # Best effort: any limit a platform refuses is skipped so the payload
    # still runs; the supervising service provides the hard backstop.
    mem = memory_limit_mb * 1024 * 1024
    cpu = max(1, -(-timeout_ms // 1000) + 1)
    fsize = max(64 * 1024 * 1024, stdout_limit_bytes * 4)
    for name, value in (
        ("RLIMIT_AS", mem),
        ("RLIMIT_CPU", cpu),
        ("RLIMIT_FSIZE", fsize),
        ("RLIMIT_NPROC", 256),
    ):
        try:
            resource.setrlimit(getattr(resource, name), (value, value))
        except (ValueError, OSError):
            pass
    try:
        import ctypes

        ctypes.CDLL(None, use_errno=True).unshare(0x40000000)  # CLONE_NEWNET
    except Exception:
        pass


def _read_capped(path: str, limit: int) -> tuple[str, bool]:
    """First ``limit`` bytes of a capture file, plus whether more existed."""
    with open(path, "rb") as fh:
        data = fh.read(limit + 1)
    truncated = len(data) > limit
    return data[:limit].decode("utf-8", errors="replace"), truncated


def _run_payload(code: str, timeout_ms: float) -> int:
    def on_alarm(signum, frame):
        raise _PayloadTimeout()

    previous = signal.signal(signal.SIGALRM, on_alarm)
    signal.setitimer(signal.ITIMER_REAL, timeout_ms / 1000.0)
    try:
        exec(compile(code, "<payload>", "exec"), {"__name__": "__main__"})
        return 0
    except _PayloadTimeout:
        return TIMEOUT_EXIT_STATUS
    except SystemExit as exc:
        if exc.code is None:
            return 0
        if isinstance(exc.code, int):
            return exc.code
        try:
            sys.stderr.write(f"{exc.code}\n")
        except BaseException:
            pass
        return 1
    except MemoryError:
        try:
            traceback.print_exc()
        except BaseException:
            os.write(2, b"MemoryError\n")
        return 1
    except BaseException:
        try:
            traceback.print_exc()
        except BaseException:
            pass
        return 1
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, previous)


def run_once(frame: dict[str, Any]) -> dict[str, Any]:
    """Execute one parsed frame and return the result frame fields."""
    scratch = tempfile.mkdtemp(prefix="ztir-worker-")
    original_cwd = os.getcwd()
    out_path = os.path.join(scratch, "out.bin")
    err_path = os.path.join(scratch, "err.bin")
    in_path = os.path.join(scratch, "in.bin")
    with open(in_path, "w", encoding="utf-8") as fh:
        fh.write(frame["stdin"])

    sys.stdout.flush()
    sys.stderr.flush()
    out_f = open(out_path, "wb")
    err_f = open(err_path, "wb")
    in_f = open(in_path, "rb")
    saved = [os.dup(fd) for fd in (0, 1, 2)]
    try:
        os.dup2(in_f.fileno(), 0)
        os.dup2(out_f.fileno(), 1)
        os.dup2(err_f.fileno(), 2)
        # The wrapper that read the frame has already seen EOF; give the
        # payload a fresh one over the redirected descriptor.
        sys.stdin = io.TextIOWrapper(io.FileIO(0, "rb", closefd=False), encoding="utf-8")
        os.chdir(scratch)
        _apply_limits(
            frame["memory_limit_mb"], frame["timeout_ms"], frame["stdout_limit_bytes"]
        )
        exit_status = _run_payload(frame["code"], frame["timeout_ms"])
    finally:
        for stream in (sys.stdout, sys.stderr):
            try:
                stream.flush()
            except BaseException:
                pass
        for fd, backup in zip((0, 1, 2), saved):
            os.dup2(backup, fd)
            os.close(backup)
        for fh in (out_f, err_f, in_f):
            fh.close()
        os.chdir(original_cwd)

    limit = frame["stdout_limit_bytes"]
    stdout, out_trunc = _read_capped(out_path, limit)
    stderr, err_trunc = _read_capped(err_path, limit)
    shutil.rmtree(scratch, ignore_errors=True)
    return {
        "stdout": stdout,
        "stderr": stderr,
        "exit_status": exit_status,
        "truncated": out_trunc or err_trunc,
    }


def main() -> int:
    raw = sys.stdin.read()
    try:
        frame = parse_frame(raw)
    except MalformedFrame as exc:
        sys.stderr.write(f"malformed frame: {exc}\n")
        return 2

    # Hold the frame stream open across the payload; fds 0-2 get redirected.
    result_fd = os.dup(1)
    result = run_once(frame)
    with os.fdopen(result_fd, "w", encoding="utf-8") as frame_stream:
        frame_stream.write(json.dumps(result, ensure_ascii=False) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

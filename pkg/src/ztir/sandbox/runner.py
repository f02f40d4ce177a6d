"""Process-level execution: fresh interpreter per request, hard watchdog.

Two paths share the watchdog machinery:
  - direct: spawn a Python interpreter on the payload with a resource-limit
    prelude prepended (the minimal fallback path; no worker binary needed);
  - frame: spawn a worker harness and speak the single-line JSON frame
    protocol over its stdin/stdout (limits enforced inside the worker too).

Resource limits are applied by the child itself (prelude or harness) rather
than between fork and exec, which is not safe in a threaded server.  The
watchdog owns the process group: SIGTERM at the deadline, SIGKILL after a
grace period, so runaway children and their forks cannot outlive a request.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from ztir.sandbox.types import (
    TIMEOUT_EXIT_STATUS,
    ExecRequest,
    ExecResult,
    Verdict,
    classify,
)

GRACE_MS = 500

# Executed before the payload: address-space/CPU/file-size/process caps plus
# best-effort network denial.  Failures are ignored so the payload still runs
# on platforms where a limit cannot be applied.
_PRELUDE = """\
import resource as _r
for _k, _v in (("RLIMIT_AS", {mem_bytes}), ("RLIMIT_CPU", {cpu_s}),
               ("RLIMIT_FSIZE", {fsize}), ("RLIMIT_NPROC", 256)):
    try:
        _r.setrlimit(getattr(_r, _k), (_v, _v))
    except (ValueError, OSError):
        pass
try:
    import ctypes as _c
    _c.CDLL(None, use_errno=True).unshare(0x40000000)
except Exception:
    pass
del _r
"""


def build_prelude(req: ExecRequest) -> str:
    return _PRELUDE.format(
        mem_bytes=req.memory_limit_mb * 1024 * 1024,
        cpu_s=max(1, math.ceil(req.timeout_ms / 1000) + 1),
        fsize=max(64 * 1024 * 1024, req.stdout_limit_bytes * 4),
    )


def _kill_group(proc: subprocess.Popen, grace_ms: int) -> None:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except (ProcessLookupError, PermissionError):
        return
    try:
        proc.wait(timeout=grace_ms / 1000.0)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        proc.wait()


def _read_capped(path: str, limit: int) -> tuple[str, bool]:
    """First `limit` bytes of a capture file, plus whether more existed."""
    with open(path, "rb") as fh:
        data = fh.read(limit + 1)
    truncated = len(data) > limit
    return data[:limit].decode("utf-8", errors="replace"), truncated


@dataclass
class LocalRunner:
    """Executes one request per call; safe for concurrent use (no shared
    mutable state beyond the OS)."""

    worker_cmd: Optional[Sequence[str]] = None
    grace_ms: int = GRACE_MS
    python: str = sys.executable

    def execute(self, request: ExecRequest) -> ExecResult:
        if self.worker_cmd:
            return self._run_frame(request)
        return self._run_direct(request)

    # -- direct path ---------------------------------------------------------

    def _run_direct(self, req: ExecRequest) -> ExecResult:
        scratch = tempfile.mkdtemp(prefix="ztir-exec-")
        try:
            program = os.path.join(scratch, "program.py")
            with open(program, "w", encoding="utf-8") as fh:
                fh.write(build_prelude(req))
                fh.write(req.code)
            out_path = os.path.join(scratch, "out.bin")
            err_path = os.path.join(scratch, "err.bin")
            in_path = os.path.join(scratch, "in.bin")
            with open(in_path, "w", encoding="utf-8") as fh:
                fh.write(req.stdin)

            env = {
                "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
                "HOME": scratch,
                "TMPDIR": scratch,
                "LANG": "C.UTF-8",
            }
            started = time.monotonic()
            with open(out_path, "wb") as out_f, open(err_path, "wb") as err_f, \
                    open(in_path, "rb") as in_f:
                proc = subprocess.Popen(
                    [self.python, "-I", program],
                    cwd=scratch,
                    stdin=in_f,
                    stdout=out_f,
                    stderr=err_f,
                    env=env,
                    start_new_session=True,
                )
                timed_out = False
                try:
                    exit_status = proc.wait(timeout=req.timeout_ms / 1000.0)
                except subprocess.TimeoutExpired:
                    timed_out = True
                    _kill_group(proc, self.grace_ms)
                    exit_status = proc.returncode
            elapsed_ms = math.ceil((time.monotonic() - started) * 1000)

            stdout, out_trunc = _read_capped(out_path, req.stdout_limit_bytes)
            stderr, err_trunc = _read_capped(err_path, req.stdout_limit_bytes)
            if timed_out:
                verdict = Verdict.TIMEOUT
                elapsed_ms = max(elapsed_ms, req.timeout_ms)
            else:
                verdict = classify(exit_status, stderr)
            return ExecResult(
                stdout=stdout,
                stderr=stderr,
                exit_status=exit_status,
                duration_ms=elapsed_ms,
                truncated=out_trunc or err_trunc,
                verdict=verdict,
            )
        finally:
            shutil.rmtree(scratch, ignore_errors=True)

    # -- frame path ----------------------------------------------------------

    def _run_frame(self, req: ExecRequest) -> ExecResult:
        frame = json.dumps(
            {
                "code": req.code,
                "timeout_ms": req.timeout_ms,
                "memory_limit_mb": req.memory_limit_mb,
                "stdout_limit_bytes": req.stdout_limit_bytes,
                "stdin": req.stdin,
            },
            ensure_ascii=False,
        )
        hard_timeout_s = (req.timeout_ms + self.grace_ms + 2000) / 1000.0
        started = time.monotonic()
        proc = subprocess.Popen(
            list(self.worker_cmd or ()),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        timed_out = False
        try:
            raw_out, raw_err = proc.communicate(
                frame.encode("utf-8"), timeout=hard_timeout_s
            )
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_group(proc, self.grace_ms)
            raw_out, raw_err = proc.communicate()
        elapsed_ms = math.ceil((time.monotonic() - started) * 1000)

        if proc.returncode == 0 and not timed_out:
            try:
                body = json.loads(raw_out.decode("utf-8", errors="replace"))
                result = ExecResult(
                    stdout=body["stdout"],
                    stderr=body["stderr"],
                    exit_status=body["exit_status"],
                    duration_ms=elapsed_ms,
                    truncated=bool(body["truncated"]),
                )
            except (ValueError, KeyError, TypeError):
                return ExecResult(
                    stdout="",
                    stderr="worker emitted an invalid result frame",
                    exit_status=-1,
                    duration_ms=elapsed_ms,
                    truncated=False,
                    verdict=Verdict.WORKER_CRASH,
                )
            if result.verdict is Verdict.TIMEOUT and result.duration_ms < req.timeout_ms:
                result = ExecResult(
                    stdout=result.stdout,
                    stderr=result.stderr,
                    exit_status=result.exit_status,
                    duration_ms=req.timeout_ms,
                    truncated=result.truncated,
                )
            return result

        verdict = Verdict.TIMEOUT if timed_out else Verdict.WORKER_CRASH
        return ExecResult(
            stdout="",
            stderr=raw_err.decode("utf-8", errors="replace")[-4096:],
            exit_status=proc.returncode if proc.returncode is not None else -1,
            duration_ms=max(elapsed_ms, req.timeout_ms) if timed_out else elapsed_ms,
            truncated=False,
            verdict=verdict,
        )

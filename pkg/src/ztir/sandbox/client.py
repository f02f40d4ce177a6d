"""Engine-side execution clients.

ExecClient talks HTTP to the sandbox service with client-side token-bucket
rate limiting.  StubExecClient runs code in-process for tests and the toy
training loop, where spawning an interpreter per call would dominate runtime;
it must only ever see trusted code.
"""

from __future__ import annotations

import io
import os
import threading
import time
import traceback
from contextlib import redirect_stdout
from typing import Optional

import requests

from ztir.sandbox.types import ExecRequest, ExecResult, ExecTransportError


class RateLimiter:
    """Blocking token bucket: acquire() sleeps until a token is available.

    Thread-safe; capacity equals one second of refill so short bursts pass
    through while the sustained rate stays at requests_per_sec.
    """

    def __init__(self, requests_per_sec: float):
        if requests_per_sec <= 0:
            raise ValueError("requests_per_sec must be positive")
        self.rate = requests_per_sec
        self.capacity = max(1.0, requests_per_sec)
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._stamp) * self.rate
                )
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class ExecClient:
    """HTTP client for the sandbox service; safe for concurrent use."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        requests_per_sec: Optional[float] = None,
        extra_timeout_ms: int = 10000,
        session: Optional[requests.Session] = None,
    ):
        url = base_url or os.environ.get("ZTIR_SANDBOX_URL")
        if not url:
            raise ValueError("no base_url given and ZTIR_SANDBOX_URL unset")
        self._url = url.rstrip("/")
        self._limiter = RateLimiter(requests_per_sec) if requests_per_sec else None
        self._extra_ms = extra_timeout_ms
        self._session = session or requests.Session()

    def execute(self, request: ExecRequest) -> ExecResult:
        if self._limiter:
            self._limiter.acquire()
        timeout_s = (request.timeout_ms + self._extra_ms) / 1000.0
        try:
            resp = self._session.post(
                self._url + "/execute", json=request.to_wire(), timeout=timeout_s
            )
        except requests.RequestException as exc:
            raise ExecTransportError(f"execute call failed: {exc}") from exc
        if resp.status_code == 429:
            try:
                return ExecResult.from_wire(resp.json())
            except (ValueError, KeyError):
                return ExecResult.rejected()
        if resp.status_code != 200:
            raise ExecTransportError(
                f"service fault: HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            return ExecResult.from_wire(resp.json())
        except (ValueError, KeyError, TypeError) as exc:
            raise ExecTransportError(f"malformed service response: {exc}") from exc

    def healthz(self) -> dict:
        try:
            resp = self._session.get(self._url + "/healthz", timeout=5)
            resp.raise_for_status()
            return resp.json()
        except requests.RequestException as exc:
            raise ExecTransportError(f"healthz failed: {exc}") from exc


class StubExecClient:
    """In-process executor for trusted code.

    exec()s the payload in a fresh namespace, capturing stdout; exceptions
    become stderr text with a nonzero exit status, mirroring the subprocess
    contract closely enough for rollout logic.  An optional failure rate
    simulates an unreliable tool for training experiments.
    """

    def __init__(self, fail_rate: float = 0.0, rng=None, duration_ms: int = 0):
        if not 0.0 <= fail_rate <= 1.0:
            raise ValueError("fail_rate must lie in [0, 1]")
        self.fail_rate = fail_rate
        self.rng = rng
        self.duration_ms = duration_ms
        self.calls = 0

    def execute(self, request: ExecRequest) -> ExecResult:
        self.calls += 1
        if self.fail_rate > 0.0 and self.rng is not None:
            if self.rng.random() < self.fail_rate:
                return ExecResult(
                    stdout="",
                    stderr="simulated worker failure",
                    exit_status=1,
                    duration_ms=self.duration_ms,
                    truncated=False,
                )
        buffer = io.StringIO()
        namespace: dict = {"__name__": "__main__"}
        try:
            with redirect_stdout(buffer):
                exec(compile(request.code, "<sandbox>", "exec"), namespace)
            stdout, stderr, status = buffer.getvalue(), "", 0
        except BaseException as exc:
            stdout = buffer.getvalue()
            stderr = "".join(traceback.format_exception_only(type(exc), exc))
            status = 1
        truncated = False
        if len(stdout) > request.stdout_limit_bytes:
            stdout = stdout[: request.stdout_limit_bytes]
            truncated = True
        return ExecResult(
            stdout=stdout,
            stderr=stderr,
            exit_status=status,
            duration_ms=self.duration_ms,
            truncated=truncated,
        )

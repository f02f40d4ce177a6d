"""HTTP facade over the process runner: POST /execute, GET /healthz.

Admission control is a fixed worker pool fed by a bounded wait queue; a
request arriving while pool + queue are full is rejected immediately with
429 rather than queued without bound.  One crashed execution never takes the
service down: every fault is caught and mapped to a structured response.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Sequence

from ztir.sandbox.runner import LocalRunner
from ztir.sandbox.types import ExecRequest, ExecResult, Verdict

logger = logging.getLogger(__name__)

DEFAULT_POOL = 8
DEFAULT_HARD_TIMEOUT_MS = 30000


class _TokenBucket:
    """Classic token bucket; capacity equals the per-second rate."""

    def __init__(self, rate_per_sec: float):
        self.rate = rate_per_sec
        self.capacity = max(1.0, rate_per_sec)
        self.tokens = self.capacity
        self.stamp = time.monotonic()
        self.lock = threading.Lock()

    def try_take(self) -> bool:
        with self.lock:
            now = time.monotonic()
            self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now
            if self.tokens >= 1.0:
                self.tokens -= 1.0
                return True
            return False


@dataclass
class ServiceConfig:
    bind_host: str = "127.0.0.1"
    bind_port: int = 8731
    pool_size: int = DEFAULT_POOL
    queue_capacity: Optional[int] = None  # default: 8 x pool_size
    hard_timeout_ms: int = DEFAULT_HARD_TIMEOUT_MS
    rate_limit_per_client: Optional[float] = None
    worker_cmd: Optional[Sequence[str]] = None
    grace_ms: int = 500

    def __post_init__(self) -> None:
        if self.queue_capacity is None:
            self.queue_capacity = 8 * self.pool_size

    @classmethod
    def from_env(cls) -> "ServiceConfig":
        cfg = cls()
        bind = os.environ.get("ZTIR_SANDBOX_BIND")
        if bind:
            host, _, port = bind.rpartition(":")
            cfg.bind_host = host or "127.0.0.1"
            cfg.bind_port = int(port)
        pool = os.environ.get("ZTIR_SANDBOX_POOL")
        if pool:
            cfg.pool_size = int(pool)
            cfg.queue_capacity = 8 * cfg.pool_size
        hard = os.environ.get("ZTIR_SANDBOX_HARD_TIMEOUT_MS")
        if hard:
            cfg.hard_timeout_ms = int(hard)
        worker = os.environ.get("ZTIR_SANDBOX_WORKER_CMD")
        if worker:
            cfg.worker_cmd = worker.split()
        return cfg


class SandboxService:
    """Owns the HTTP server and the admission state."""

    def __init__(self, config: Optional[ServiceConfig] = None):
        self.config = config or ServiceConfig()
        self.runner = LocalRunner(
            worker_cmd=self.config.worker_cmd, grace_ms=self.config.grace_ms
        )
        self._admission_lock = threading.Lock()
        self._admitted = 0
        self._busy = 0
        self._pool = threading.Semaphore(self.config.pool_size)
        self._buckets: dict[str, _TokenBucket] = {}
        self._bucket_lock = threading.Lock()

        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt: str, *args) -> None:
                logger.debug("http: " + fmt, *args)

            def _send_json(self, status: int, body: dict) -> None:
                payload = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self) -> None:
                if self.path != "/healthz":
                    self._send_json(404, {"error": "not found"})
                    return
                self._send_json(200, {"status": "ok", "workers_busy": service.busy})

            def do_POST(self) -> None:
                if self.path != "/execute":
                    self._send_json(404, {"error": "not found"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                    request = ExecRequest.from_wire(body)
                except (ValueError, KeyError, TypeError) as exc:
                    self._send_json(500, {"error": f"bad request body: {exc}"})
                    return
                if not service.client_allowed(self.client_address[0]):
                    self._send_json(429, ExecResult.rejected().to_wire())
                    return
                try:
                    status, result = service.handle(request)
                    self._send_json(status, result.to_wire())
                except Exception as exc:  # service fault, never a crash
                    logger.exception("execution fault")
                    self._send_json(500, {"error": str(exc)})

        self._server = ThreadingHTTPServer(
            (self.config.bind_host, self.config.bind_port), Handler
        )
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    # -- admission -----------------------------------------------------------

    @property
    def busy(self) -> int:
        with self._admission_lock:
            return self._busy

    def client_allowed(self, client_ip: str) -> bool:
        rate = self.config.rate_limit_per_client
        if rate is None:
            return True
        with self._bucket_lock:
            bucket = self._buckets.get(client_ip)
            if bucket is None:
                bucket = self._buckets[client_ip] = _TokenBucket(rate)
        return bucket.try_take()

    def handle(self, request: ExecRequest) -> tuple[int, ExecResult]:
        assert self.config.queue_capacity is not None
        limit = self.config.pool_size + self.config.queue_capacity
        with self._admission_lock:
            if self._admitted >= limit:
                return 429, ExecResult.rejected()
            self._admitted += 1
        try:
            self._pool.acquire()
            with self._admission_lock:
                self._busy += 1
            try:
                capped = request
                if request.timeout_ms > self.config.hard_timeout_ms:
                    capped = ExecRequest(
                        code=request.code,
                        timeout_ms=self.config.hard_timeout_ms,
                        memory_limit_mb=request.memory_limit_mb,
                        stdout_limit_bytes=request.stdout_limit_bytes,
                        stdin=request.stdin,
                    )
                return 200, self.runner.execute(capped)
            finally:
                with self._admission_lock:
                    self._busy -= 1
                self._pool.release()
        finally:
            with self._admission_lock:
                self._admitted -= 1

    # -- lifecycle -----------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[0], self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "SandboxService":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="sandbox-http", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        logger.info("sandbox service on %s (pool %d)", self.url, self.config.pool_size)
        try:
            self._server.serve_forever()
        finally:
            self._server.server_close()


def serve(
    bind_address: str = "127.0.0.1:8731",
    worker_pool_size: int = DEFAULT_POOL,
    rate_limit_per_client: Optional[float] = None,
    worker_cmd: Optional[Sequence[str]] = None,
) -> None:
    """Run the service in the foreground until interrupted."""
    host, _, port = bind_address.rpartition(":")
    config = ServiceConfig(
        bind_host=host or "127.0.0.1",
        bind_port=int(port),
        pool_size=worker_pool_size,
        rate_limit_per_client=rate_limit_per_client,
        worker_cmd=worker_cmd,
    )
    SandboxService(config).serve_forever()

"""Wire types for the code-execution service.

These mirror the JSON bodies of POST /execute exactly.  A nonzero exit from
the payload is still verdict Ok (the program ran; it failed); the other
verdicts describe faults of the run itself, not of the code under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class Verdict(str, Enum):
    OK = "Ok"
    TIMEOUT = "Timeout"
    MEMORY_EXCEEDED = "MemoryExceeded"
    WORKER_CRASH = "WorkerCrash"
    REJECTED = "Rejected"


# Exit status reserved for the in-worker timeout (same convention as
# coreutils timeout(1)).
TIMEOUT_EXIT_STATUS = 124


class ExecTransportError(Exception):
    """The execution service could not be reached or faulted server-side."""


def classify(exit_status: int, stderr: str) -> Verdict:
    """Reconstruct a verdict from observable result fields.

    Used when a result arrives without one (trajectory logs omit it).  The
    supervising runner may override this with better information, e.g. a
    watchdog kill is Timeout even though the exit status is a signal.
    """
    if exit_status == TIMEOUT_EXIT_STATUS:
        return Verdict.TIMEOUT
    if "MemoryError" in stderr:
        return Verdict.MEMORY_EXCEEDED
    if exit_status < 0:
        return Verdict.WORKER_CRASH
    return Verdict.OK


@dataclass(frozen=True)
class ExecRequest:
    """One code snippet to run, with resource ceilings.

    stdin is optional and unused by the rollout engine; it exists for
    standalone service clients.
    """

    code: str
    timeout_ms: int = 5000
    memory_limit_mb: int = 512
    stdout_limit_bytes: int = 65536
    stdin: str = ""

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.memory_limit_mb <= 0:
            raise ValueError("memory_limit_mb must be positive")
        if self.stdout_limit_bytes <= 0:
            raise ValueError("stdout_limit_bytes must be positive")

    def to_wire(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "code": self.code,
            "timeout_ms": self.timeout_ms,
            "memory_limit_mb": self.memory_limit_mb,
            "stdout_limit_bytes": self.stdout_limit_bytes,
        }
        if self.stdin:
            body["stdin"] = self.stdin
        return body

    @classmethod
    def from_wire(cls, body: dict[str, Any]) -> "ExecRequest":
        return cls(
            code=body["code"],
            timeout_ms=body.get("timeout_ms", 5000),
            memory_limit_mb=body.get("memory_limit_mb", 512),
            stdout_limit_bytes=body.get("stdout_limit_bytes", 65536),
            stdin=body.get("stdin", ""),
        )


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one execution.

    verdict is excluded from equality so that results round-tripped through
    trajectory logs (which omit it) compare equal to the originals.
    """

    stdout: str
    stderr: str
    exit_status: int
    duration_ms: int
    truncated: bool
    verdict: Verdict | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.duration_ms < 0:
            raise ValueError("duration_ms must be non-negative")
        if self.verdict is None:
            object.__setattr__(self, "verdict", classify(self.exit_status, self.stderr))

    def to_wire(self) -> dict[str, Any]:
        verdict = self.verdict
        assert verdict is not None
        return {
            "stdout": self.stdout,
            "stderr": self.stderr,
            "exit_status": self.exit_status,
            "duration_ms": self.duration_ms,
            "truncated": self.truncated,
            "verdict": verdict.value,
        }

    @classmethod
    def from_wire(cls, body: dict[str, Any]) -> "ExecResult":
        verdict = Verdict(body["verdict"]) if "verdict" in body else None
        return cls(
            stdout=body["stdout"],
            stderr=body["stderr"],
            exit_status=body["exit_status"],
            duration_ms=body["duration_ms"],
            truncated=bool(body["truncated"]),
            verdict=verdict,
        )

    @classmethod
    def rejected(cls) -> "ExecResult":
        return cls(stdout="", stderr="rejected: executor at capacity",
                   exit_status=-1, duration_ms=0, truncated=False,
                   verdict=Verdict.REJECTED)

"""Generation backends: the interface, a deterministic scripted backend for
tests, and an HTTP completion client for real serving stacks.

Contract: generate(context, stop_set, sampling) returns text that contains no
active stop string; the matched stop is reported separately and was consumed
from the stream (it is not part of text).  stop=None means the backend ended
naturally (EOS or length).
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import requests


@dataclass(frozen=True)
class BackendCapabilities:
    supports_stop_strings: bool
    eos_marker: str


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    seed: Optional[int] = None
    max_tokens: int = 4096


@dataclass(frozen=True)
class Generation:
    """One backend call's output.  token_count is in abstract backend units."""

    text: str
    stop: Optional[str]
    token_count: int


class BackendFailure(Exception):
    """Transport-level generation failure; rollouts end with BackendError."""


class ScenarioMismatch(Exception):
    """The scripted backend was driven off its script; a test-authoring bug."""


class GenerationBackend(Protocol):
    @property
    def capabilities(self) -> BackendCapabilities: ...

    def generate(
        self,
        context: str,
        stop_set: Sequence[str],
        sampling: Optional[SamplingParams] = None,
    ) -> Generation: ...


@dataclass(frozen=True)
class ScenarioStep:
    """One scripted emission: optional context assertion, text, matched stop."""

    await_context_suffix: str
    emit: str
    stop: str
    tokens: Optional[int] = None


def load_scenario(path: str) -> list[ScenarioStep]:
    """Scenario JSONL: {await_context_suffix, emit, stop[, tokens]} per line.

    expect_context_suffix is accepted as an alias for await_context_suffix.
    """
    steps: list[ScenarioStep] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            suffix = rec.get("await_context_suffix", rec.get("expect_context_suffix", ""))
            steps.append(
                ScenarioStep(
                    await_context_suffix=suffix,
                    emit=rec["emit"],
                    stop=rec["stop"],
                    tokens=rec.get("tokens"),
                )
            )
    return steps


class ScriptedBackend:
    """Replays a fixed list of (emit, stop) steps, asserting context suffixes.

    Deterministic byte-for-byte; any divergence from the script raises
    ScenarioMismatch rather than improvising.
    """

    def __init__(self, steps: Sequence[ScenarioStep], eos_marker: str = "<eos>"):
        self._steps = list(steps)
        self._cursor = 0
        self._eos = eos_marker

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=True, eos_marker=self._eos)

    @property
    def exhausted(self) -> bool:
        return self._cursor >= len(self._steps)

    def generate(
        self,
        context: str,
        stop_set: Sequence[str],
        sampling: Optional[SamplingParams] = None,
    ) -> Generation:
        if self._cursor >= len(self._steps):
            raise ScenarioMismatch("script exhausted but generation continued")
        step = self._steps[self._cursor]
        self._cursor += 1
        if step.await_context_suffix and not context.endswith(step.await_context_suffix):
            raise ScenarioMismatch(
                f"step {self._cursor}: context does not end with "
                f"{step.await_context_suffix!r} (tail: {context[-80:]!r})"
            )
        if step.stop not in stop_set:
            raise ScenarioMismatch(
                f"step {self._cursor}: scripted stop {step.stop!r} is not in the "
                f"active stop set {sorted(stop_set)!r}"
            )
        tokens = step.tokens if step.tokens is not None else len(step.emit) + 1
        stop = None if step.stop == self._eos else step.stop
        return Generation(text=step.emit, stop=stop, token_count=tokens)


class HttpCompletionBackend:
    """Client for a generic completion endpoint.

    Request: POST base_url with JSON {prompt, stop, temperature, top_p,
    max_tokens}; response JSON {text, stop, tokens} where stop is the matched
    literal or null for a natural end.  The auth token, if any, comes from
    the token argument, falling back to ZTIR_BACKEND_TOKEN.
    """

    def __init__(
        self,
        base_url: str,
        eos_marker: str = "<eos>",
        timeout_ms: int = 30000,
        supports_stop_strings: bool = True,
        session: Optional[requests.Session] = None,
        token: Optional[str] = None,
    ):
        self._url = base_url
        self._eos = eos_marker
        self._timeout = timeout_ms / 1000.0
        self._supports_stops = supports_stop_strings
        self._session = session or requests.Session()
        self._token = token
        self._lock = threading.Lock()

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            supports_stop_strings=self._supports_stops, eos_marker=self._eos
        )

    def generate(
        self,
        context: str,
        stop_set: Sequence[str],
        sampling: Optional[SamplingParams] = None,
    ) -> Generation:
        sampling = sampling or SamplingParams()
        body = {
            "prompt": context,
            "stop": list(stop_set) if self._supports_stops else [],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_tokens,
        }
        headers = {}
        token = self._token if self._token is not None else os.environ.get(
            "ZTIR_BACKEND_TOKEN"
        )
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._session.post(
                self._url, json=body, headers=headers, timeout=self._timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise BackendFailure(f"completion request failed: {exc}") from exc
        try:
            text = payload["text"]
            stop = payload.get("stop")
            tokens = int(payload.get("tokens", len(text) + 1))
        except (KeyError, TypeError) as exc:
            raise BackendFailure(f"malformed completion response: {exc}") from exc
        return Generation(text=text, stop=stop, token_count=tokens)

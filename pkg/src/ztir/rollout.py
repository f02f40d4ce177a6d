"""Interactive rollout: generation interleaved with code execution.

One rollout alternates free generation (stopping on EOS, a code-fence open,
a stray fence close, or a boxed-answer trigger) with code-block generation
(stopping on the close fence), executing each completed block and injecting
its formatted output back into the context.  A tool-call budget gates
execution; on exhaustion the rollout either returns immediately or injects a
notice and continues without tool access, depending on budget_mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

from ztir.backends import (
    BackendFailure,
    Generation,
    GenerationBackend,
    SamplingParams,
)
from ztir.model import (
    BudgetMode,
    Origin,
    Problem,
    RolloutConfig,
    Segment,
    SegmentKind,
    StopReason,
    ToolCallRecord,
    Trajectory,
)
from ztir.sandbox.types import ExecRequest, ExecResult, ExecTransportError, Verdict

logger = logging.getLogger(__name__)

NOTICE_TEXT = "Tool call count has been exhausted. You can no longer call the tool."


class StopClass(str, Enum):
    TERMINAL_EOS = "Terminal_Eos"
    TERMINAL_BOXED = "Terminal_Boxed"
    CODE_OPEN = "CodeOpen"
    CODE_CLOSE = "CodeClose"


@dataclass(frozen=True)
class StopEvent:
    matched_token: str
    stop_class: StopClass


class ProtocolError(Exception):
    """The backend returned a stop outside the active set or leaked a stop
    string into its text; indicates the backend ignored the stop contract."""


class Executor(Protocol):
    def execute(self, request: ExecRequest) -> ExecResult: ...


def classify_stop(matched: str, config: RolloutConfig) -> StopEvent:
    if matched == config.eos_marker:
        return StopEvent(matched, StopClass.TERMINAL_EOS)
    if matched == config.code_open:
        return StopEvent(matched, StopClass.CODE_OPEN)
    if matched == config.code_close:
        return StopEvent(matched, StopClass.CODE_CLOSE)
    if matched == config.boxed_open:
        return StopEvent(matched, StopClass.TERMINAL_BOXED)
    raise ProtocolError(f"stop token {matched!r} is not in the configured stop set")


def extract_code(
    code_segment_text: str,
    code_open: str = "```python",
    code_close: str = "```",
) -> str:
    """Strip any remaining fence markers and trim leading/trailing newlines;
    interior bytes are preserved exactly."""
    s = code_segment_text
    if s.startswith(code_open):
        s = s[len(code_open):]
    if code_close and s.endswith(code_close):
        s = s[: -len(code_close)]
    return s.strip("\r\n")


def format_feedback(result: ExecResult, config: RolloutConfig) -> str:
    """Render an execution result for context injection.

    Payload is stdout on success, stderr otherwise; one trailing newline is
    absorbed by the template, and overlong payloads are cut to the configured
    limit with a trailing "[truncated]" marker.
    """
    payload = result.stdout if result.exit_status == 0 else result.stderr
    if payload.endswith("\n"):
        payload = payload[:-1]
    limit = config.feedback_limit_chars
    marker = "[truncated]"
    if len(payload) > limit:
        payload = payload[: max(0, limit - len(marker))] + marker
    return config.feedback_template.format(payload=payload)


def find_first_stop(text: str, stops: Sequence[str]) -> Optional[tuple[int, str]]:
    """Earliest stop occurrence; ties at one index go to the longest literal
    (so "```python" wins over its "```" prefix)."""
    best: Optional[tuple[int, str]] = None
    for literal in stops:
        if not literal:
            continue
        idx = text.find(literal)
        if idx < 0:
            continue
        if best is None or idx < best[0] or (idx == best[0] and len(literal) > len(best[1])):
            best = (idx, literal)
    return best


class _TrajectoryBuilder:
    """Accumulates segments and the exact context string in lockstep."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.segments: list[Segment] = []
        self._parts: list[str] = [problem.prompt]
        self.records: list[ToolCallRecord] = []

    def context(self) -> str:
        return "".join(self._parts)

    def reasoning(self, text: str) -> None:
        if not text:
            return
        self._parts.append(text)
        if self.segments and self.segments[-1].kind is SegmentKind.REASONING:
            merged = self.segments[-1].text + text
            self.segments[-1] = Segment(Origin.POLICY, SegmentKind.REASONING, merged)
        else:
            self.segments.append(Segment(Origin.POLICY, SegmentKind.REASONING, text))

    def code_block(self, text: str) -> None:
        self._parts.append(text)
        self.segments.append(Segment(Origin.POLICY, SegmentKind.CODE_BLOCK, text))

    def tool_output(self, text: str) -> None:
        self._parts.append(text)
        self.segments.append(Segment(Origin.ENVIRONMENT, SegmentKind.TOOL_OUTPUT, text))

    def notice(self, text: str) -> None:
        self._parts.append(text)
        self.segments.append(Segment(Origin.ENVIRONMENT, SegmentKind.NOTICE, text))

    def build(self, stop_reason: StopReason, token_count: int) -> Trajectory:
        return Trajectory(
            problem_id=self.problem.id,
            segments=tuple(self.segments),
            stop_reason=stop_reason,
            tool_calls=tuple(self.records),
            token_count=token_count,
        )


def _checked_generate(
    backend: GenerationBackend,
    context: str,
    stops: Sequence[str],
    sampling: Optional[SamplingParams],
) -> Generation:
    """Call the backend, enforcing the stop contract; falls back to
    client-side scan-and-truncate for backends without stop support."""
    gen = backend.generate(context, stops, sampling)
    if backend.capabilities.supports_stop_strings:
        if gen.stop is not None and gen.stop not in stops:
            raise ProtocolError(f"backend stopped on {gen.stop!r}, not in active set")
        hit = find_first_stop(gen.text, stops)
        if hit is not None:
            raise ProtocolError(
                f"backend leaked stop literal {hit[1]!r} inside generated text"
            )
        return gen
    hit = find_first_stop(gen.text, stops)
    if hit is None:
        return Generation(text=gen.text, stop=None, token_count=gen.token_count)
    idx, literal = hit
    # Token count kept as reported: units are abstract and the ceiling only
    # needs an upper bound on consumption.
    return Generation(text=gen.text[:idx], stop=literal, token_count=gen.token_count)


def run_rollout(
    backend: GenerationBackend,
    problem: Problem,
    env: Executor,
    config: RolloutConfig,
    sampling: Optional[SamplingParams] = None,
) -> Trajectory:
    """Run one complete episode and return its trajectory.

    Execution-service faults become tool-output text and the rollout
    continues; generation transport failures end it with BackendError.
    """
    builder = _TrajectoryBuilder(problem)
    tokens = 0
    calls_seen = 0
    notice_injected = False

    def exec_request(code: str) -> ExecRequest:
        return ExecRequest(
            code=code,
            timeout_ms=config.exec_timeout_ms,
            memory_limit_mb=config.exec_memory_limit_mb,
            stdout_limit_bytes=config.exec_stdout_limit_bytes,
        )

    def free_stops() -> list[str]:
        stops = [s for s in config.stop_token_set if s]
        if notice_injected:
            stops = [s for s in stops if s != config.code_open]
        return stops

    while True:
        if tokens >= config.max_total_tokens:
            return builder.build(StopReason.LENGTH_LIMIT, tokens)
        try:
            gen = _checked_generate(backend, builder.context(), free_stops(), sampling)
        except BackendFailure as exc:
            logger.warning("generation failed: %s", exc)
            return builder.build(StopReason.BACKEND_ERROR, tokens)
        tokens += max(1, gen.token_count)

        if gen.stop is None or gen.stop == config.eos_marker:
            builder.reasoning(gen.text)
            return builder.build(StopReason.EOS, tokens)

        event = classify_stop(gen.stop, config)

        if event.stop_class is StopClass.CODE_CLOSE:
            # A close fence outside any code block: terminal branch.
            builder.reasoning(gen.text + config.code_close)
            return builder.build(StopReason.EOS, tokens)

        if event.stop_class is StopClass.TERMINAL_BOXED:
            stop_reason, scan_tokens = _scan_boxed(
                builder, backend, config, sampling, gen.text, config.max_total_tokens - tokens
            )
            return builder.build(stop_reason, tokens + scan_tokens)

        # CodeOpen: budget gate, then code-block generation.
        calls_seen += 1
        if calls_seen > config.max_tool_calls:
            builder.reasoning(gen.text + config.code_open)
            if config.budget_mode is BudgetMode.ALG1_RETURN:
                return builder.build(StopReason.BUDGET_EXHAUSTED, tokens)
            builder.notice(NOTICE_TEXT)
            notice_injected = True
            continue

        builder.reasoning(gen.text)
        code_stops = [config.code_close, config.eos_marker]
        try:
            body = _checked_generate(backend, builder.context() + config.code_open,
                                     code_stops, sampling)
        except BackendFailure as exc:
            logger.warning("generation failed inside code block: %s", exc)
            builder.reasoning(config.code_open)
            return builder.build(StopReason.BACKEND_ERROR, tokens)
        tokens += max(1, body.token_count)

        if body.stop is None or body.stop == config.eos_marker:
            # EOS while the block is still open: record the partial block,
            # execute nothing.
            builder.code_block(config.code_open + body.text)
            return builder.build(StopReason.EOS, tokens)

        builder.code_block(config.code_open + body.text + config.code_close)
        code = extract_code(body.text, config.code_open, config.code_close)
        try:
            result = env.execute(exec_request(code))
        except ExecTransportError as exc:
            logger.warning("execution service unreachable: %s", exc)
            result = ExecResult(
                stdout="",
                stderr=f"execution service unavailable: {exc}",
                exit_status=-1,
                duration_ms=0,
                truncated=False,
                verdict=Verdict.WORKER_CRASH,
            )
        builder.records.append(
            ToolCallRecord(
                index=len(builder.records) + 1,
                code=code,
                result=result,
                wall_time_ms=result.duration_ms,
            )
        )
        builder.tool_output(format_feedback(result, config))


def _scan_boxed(
    builder: _TrajectoryBuilder,
    backend: GenerationBackend,
    config: RolloutConfig,
    sampling: Optional[SamplingParams],
    lead_text: str,
    token_budget: int,
) -> tuple[StopReason, int]:
    """Consume the boxed argument until its brace balance closes.

    Nested braces are tracked by a counter: opens appear inside generated
    chunks, closes only as the stop itself.  Returns the terminal reason and
    the tokens consumed by the scan.
    """
    parts = [lead_text, config.boxed_open]
    balance = 1
    tokens = 0
    stops = ["}", config.eos_marker]
    while balance > 0:
        if tokens >= token_budget:
            builder.reasoning("".join(parts))
            return StopReason.LENGTH_LIMIT, tokens
        try:
            gen = _checked_generate(
                backend, builder.context() + "".join(parts), stops, sampling
            )
        except BackendFailure as exc:
            logger.warning("generation failed inside boxed answer: %s", exc)
            builder.reasoning("".join(parts))
            return StopReason.BACKEND_ERROR, tokens
        tokens += max(1, gen.token_count)
        if gen.stop is None or gen.stop == config.eos_marker:
            parts.append(gen.text)
            builder.reasoning("".join(parts))
            return StopReason.EOS, tokens
        balance += gen.text.count("{") - 1
        parts.append(gen.text + "}")
    builder.reasoning("".join(parts))
    return StopReason.BOXED_ANSWER, tokens

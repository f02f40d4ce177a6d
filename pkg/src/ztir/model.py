"""Shared data model: problems, trajectories, segments, and configuration.

Everything here is immutable after construction and safe to share between
concurrent tasks.  Token counts are abstract "backend token units" reported
by whichever generation backend produced the text; nothing in this module
tokenizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator

from ztir.sandbox.types import ExecResult


class Origin(str, Enum):
    POLICY = "Policy"
    ENVIRONMENT = "Environment"


class SegmentKind(str, Enum):
    REASONING = "Reasoning"
    CODE_BLOCK = "CodeBlock"
    TOOL_OUTPUT = "ToolOutput"
    NOTICE = "Notice"


class StopReason(str, Enum):
    EOS = "Eos"
    BOXED_ANSWER = "BoxedAnswer"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    LENGTH_LIMIT = "LengthLimit"
    BACKEND_ERROR = "BackendError"


class BudgetMode(str, Enum):
    """What happens when the tool-call budget is exceeded.

    ALG1_RETURN ends the rollout immediately on the first over-budget code
    fence.  NOTICE_RESUME injects an exhaustion notice into the context and
    lets generation continue without tool access.
    """

    ALG1_RETURN = "alg1_return"
    NOTICE_RESUME = "notice_resume"


# Environment segment kinds are inserted by the orchestrator, never generated.
_ENV_ONLY_KINDS = frozenset({SegmentKind.TOOL_OUTPUT, SegmentKind.NOTICE})


@dataclass(frozen=True)
class Problem:
    """One verifiable problem: prompt in, canonical answer out."""

    id: str
    prompt: str
    gold_answer: str

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("problem prompt must be non-empty")


@dataclass(frozen=True)
class Segment:
    """A contiguous run of text with a single origin."""

    origin: Origin
    kind: SegmentKind
    text: str

    def __post_init__(self) -> None:
        if self.kind in _ENV_ONLY_KINDS and self.origin is not Origin.ENVIRONMENT:
            raise ValueError(f"{self.kind.value} segments must have Environment origin")
        if self.kind is SegmentKind.CODE_BLOCK and self.origin is not Origin.POLICY:
            raise ValueError("CodeBlock segments must have Policy origin")


@dataclass(frozen=True)
class ToolCallRecord:
    """One executed code block: ordinal, payload, and its execution result.

    wall_time_ms is client-side observational metadata; it is excluded from
    equality and from the serialized form.
    """

    index: int
    code: str
    result: ExecResult
    wall_time_ms: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("tool call index is 1-based")


@dataclass(frozen=True)
class Trajectory:
    """One complete rollout: ordered segments plus tool-call records."""

    problem_id: str
    segments: tuple[Segment, ...]
    stop_reason: StopReason
    tool_calls: tuple[ToolCallRecord, ...]
    token_count: int

    def __post_init__(self) -> None:
        if self.token_count < 0:
            raise ValueError("token_count must be non-negative")
        self.validate()

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        executed = 0
        for i, seg in enumerate(self.segments):
            if seg.kind is SegmentKind.TOOL_OUTPUT:
                prev = self.segments[i - 1] if i > 0 else None
                if prev is None or prev.kind is not SegmentKind.CODE_BLOCK:
                    raise ValueError("ToolOutput must directly follow a CodeBlock")
                executed += 1
        if executed != len(self.tool_calls):
            raise ValueError(
                f"{len(self.tool_calls)} tool calls recorded but "
                f"{executed} code blocks were executed"
            )
        for k, call in enumerate(self.tool_calls, start=1):
            if call.index != k:
                raise ValueError("tool call ordinals must be 1,2,... in order")

    def policy_text(self) -> str:
        return "".join(s.text for s in self.segments if s.origin is Origin.POLICY)

    def code_call_count(self) -> int:
        return len(self.tool_calls)


def render_context(trajectory: Trajectory, problem: Problem) -> str:
    """Rebuild the exact text the generation backend saw at each resumption.

    The prompt followed by every segment text in order; environment feedback
    is already formatted inside its segment, so this is pure concatenation.
    """
    if trajectory.problem_id != problem.id:
        raise ValueError(
            f"trajectory belongs to problem {trajectory.problem_id!r}, "
            f"not {problem.id!r}"
        )
    return problem.prompt + "".join(s.text for s in trajectory.segments)


@dataclass(frozen=True)
class RolloutConfig:
    """Every tunable of the interactive rollout loop.

    stop_token_set must contain at least the EOS marker and the code-fence
    open/close literals; the boxed-answer open trigger is optional (without
    it rollouts only terminate on EOS, budget, or length).
    """

    max_tool_calls: int = 20
    budget_mode: BudgetMode = BudgetMode.NOTICE_RESUME
    eos_marker: str = "<eos>"
    code_open: str = "```python"
    code_close: str = "```"
    boxed_open: str = "\\boxed{"
    stop_token_set: tuple[str, ...] = ()
    max_total_tokens: int = 4096
    feedback_template: str = "\n```output\n{payload}\n```\n"
    feedback_limit_chars: int = 4096
    exec_timeout_ms: int = 5000
    exec_memory_limit_mb: int = 512
    exec_stdout_limit_bytes: int = 65536

    def __post_init__(self) -> None:
        if self.max_tool_calls < 0:
            raise ValueError("max_tool_calls must be non-negative")
        if self.max_total_tokens <= 0:
            raise ValueError("max_total_tokens must be positive")
        if self.feedback_limit_chars <= 0:
            raise ValueError("feedback_limit_chars must be positive")
        if not self.stop_token_set:
            object.__setattr__(
                self,
                "stop_token_set",
                (self.eos_marker, self.code_open, self.code_close, self.boxed_open),
            )
        required = {self.eos_marker, self.code_open, self.code_close}
        missing = required - set(self.stop_token_set)
        if missing:
            raise ValueError(f"stop_token_set missing required literals: {missing}")


@dataclass(frozen=True)
class RLHyperparams:
    gamma: float = 1.0
    lam: float = 1.0
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    low_threshold: float = 0.2
    high_threshold: float = 0.8
    samples_per_prompt: int = 16
    rollout_batch: int = 128

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_beta < 0.0:
            raise ValueError("kl_beta must be non-negative")
        if not 0.0 <= self.low_threshold < self.high_threshold <= 1.0:
            raise ValueError("need 0 <= low_threshold < high_threshold <= 1")
        if self.samples_per_prompt < 1 or self.rollout_batch < 1:
            raise ValueError("samples_per_prompt and rollout_batch must be positive")


# --- JSONL trajectory schema -------------------------------------------------
#
# One trajectory per line:
#   {problem_id, stop_reason, segments:[{origin,kind,text}],
#    tool_calls:[{index,code,exec:{stdout,stderr,exit_status,duration_ms,truncated}}],
#    token_count}
# Field names are part of the wire contract and must not change.


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    return {
        "problem_id": traj.problem_id,
        "stop_reason": traj.stop_reason.value,
        "segments": [
            {"origin": s.origin.value, "kind": s.kind.value, "text": s.text}
            for s in traj.segments
        ],
        "tool_calls": [
            {
                "index": c.index,
                "code": c.code,
                "exec": {
                    "stdout": c.result.stdout,
                    "stderr": c.result.stderr,
                    "exit_status": c.result.exit_status,
                    "duration_ms": c.result.duration_ms,
                    "truncated": c.result.truncated,
                },
            }
            for c in traj.tool_calls
        ],
        "token_count": traj.token_count,
    }


def trajectory_from_dict(data: dict[str, Any]) -> Trajectory:
    segments = tuple(
        Segment(Origin(s["origin"]), SegmentKind(s["kind"]), s["text"])
        for s in data["segments"]
    )
    tool_calls = tuple(
        ToolCallRecord(
            index=c["index"],
            code=c["code"],
            result=ExecResult.from_wire(c["exec"]),
            wall_time_ms=c["exec"]["duration_ms"],
        )
        for c in data["tool_calls"]
    )
    return Trajectory(
        problem_id=data["problem_id"],
        segments=segments,
        stop_reason=StopReason(data["stop_reason"]),
        tool_calls=tool_calls,
        token_count=data["token_count"],
    )


def trajectory_to_jsonl_line(traj: Trajectory) -> str:
    return json.dumps(trajectory_to_dict(traj), ensure_ascii=False, separators=(",", ":"))


def trajectory_from_jsonl_line(line: str) -> Trajectory:
    return trajectory_from_dict(json.loads(line))


def write_trajectories(path: str, trajectories: Iterable[Trajectory]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_jsonl_line(traj) + "\n")
            n += 1
    return n


def read_trajectories(path: str) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_jsonl_line(line)


def load_problems(path: str) -> list[Problem]:
    """Load a dataset file: JSONL of {id, prompt, gold_answer}."""
    problems: list[Problem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["id"] in seen:
                raise ValueError(f"duplicate problem id {rec['id']!r}")
            seen.add(rec["id"])
            problems.append(Problem(rec["id"], rec["prompt"], rec["gold_answer"]))
    return problems

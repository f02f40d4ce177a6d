"""Outcome verification: answer extraction, exact equivalence, and metrics.

Rewards are binary.  Equivalence is exact (integers and rationals via
fractions.Fraction, never floats), so "1/2" matches "0.5" but "1/3" never
matches "0.333".  Answers found inside Environment-origin text are ignored:
the policy must state its own answer.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

from ztir.model import Origin, Problem, Trajectory

BOXED_OPEN = "\\boxed{"

_SPACING_MACROS = ("\\left", "\\right", "\\,", "\\;", "\\!", "\\ ", "$")
_THOUSANDS = re.compile(r"(?<=\d),(?=\d\d\d)")


def _strip_outer_braces(s: str) -> str:
    if len(s) >= 2 and s[0] == "{" and s[-1] == "}":
        depth = 0
        for i, ch in enumerate(s):
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0 and i != len(s) - 1:
                    return s
        return s[1:-1]
    return s


def _rewrite_fractions(s: str) -> str:
    """Rewrite one innermost \\frac{A}{B} as A/B; caller loops to fixpoint."""
    for macro in ("\\dfrac", "\\tfrac"):
        s = s.replace(macro, "\\frac")
    idx = s.rfind("\\frac{")
    if idx < 0:
        return s
    args = []
    pos = idx + len("\\frac")
    for _ in range(2):
        if pos >= len(s) or s[pos] != "{":
            return s
        depth = 0
        for j in range(pos, len(s)):
            if s[j] == "{":
                depth += 1
            elif s[j] == "}":
                depth -= 1
                if depth == 0:
                    args.append(s[pos + 1 : j])
                    pos = j + 1
                    break
        else:
            return s
    return s[:idx] + args[0] + "/" + args[1] + s[pos:]


def _normalize_once(s: str) -> str:
    s = "".join(s.split())
    for macro in _SPACING_MACROS:
        s = s.replace(macro, "")
    s = _THOUSANDS.sub("", s)
    s = _rewrite_fractions(s)
    s = _strip_outer_braces(s)
    if s.startswith("+"):
        s = s[1:]
    return s


def _parse_rational(s: str) -> Optional[Fraction]:
    """Parse integers, decimals, and slash chains (left-associative)."""
    if not s:
        return None
    parts = s.split("/")
    try:
        value = Fraction(parts[0])
        for part in parts[1:]:
            value = value / Fraction(part)
    except (ValueError, ZeroDivisionError):
        return None
    return value


def canonicalize(raw: str) -> str:
    """Normalize an answer string to its canonical form (idempotent)."""
    s = raw
    for _ in range(16):
        nxt = _normalize_once(s)
        if nxt == s:
            break
        s = nxt
    rational = _parse_rational(s)
    if rational is not None:
        return str(rational)
    return s


@dataclass(frozen=True)
class Answer:
    raw: str
    canonical: str

    @classmethod
    def of(cls, raw: str) -> "Answer":
        return cls(raw=raw, canonical=canonicalize(raw))


def answers_equivalent(a: Answer, gold: Answer) -> bool:
    return a.canonical == gold.canonical


def find_last_boxed(text: str) -> Optional[str]:
    """Argument of the last brace-balanced \\boxed{...}; None if absent."""
    start = len(text)
    while True:
        idx = text.rfind(BOXED_OPEN, 0, start)
        if idx < 0:
            return None
        depth = 0
        open_at = idx + len(BOXED_OPEN) - 1
        for j in range(open_at, len(text)):
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
                if depth == 0:
                    return text[open_at + 1 : j]
        start = idx


def extract_final_answer(trajectory: Trajectory) -> Optional[Answer]:
    raw = find_last_boxed(trajectory.policy_text())
    if raw is None:
        return None
    return Answer.of(raw)


@dataclass(frozen=True)
class RewardRecord:
    trajectory_id: str
    reward: int
    used_code: bool
    code_calls: int
    response_tokens: int

    def __post_init__(self) -> None:
        if self.reward not in (0, 1):
            raise ValueError("reward is binary")
        if self.code_calls < 0 or self.response_tokens < 0:
            raise ValueError("counts must be non-negative")
        if self.used_code != (self.code_calls >= 1):
            raise ValueError("used_code must equal code_calls >= 1")


def score_trajectory(
    trajectory: Trajectory, problem: Problem, trajectory_id: str | None = None
) -> RewardRecord:
    """Binary outcome reward: 1 iff the stated answer matches gold exactly."""
    answer = extract_final_answer(trajectory)
    gold = Answer.of(problem.gold_answer)
    reward = 1 if answer is not None and answers_equivalent(answer, gold) else 0
    calls = len(trajectory.tool_calls)
    return RewardRecord(
        trajectory_id=trajectory_id or trajectory.problem_id,
        reward=reward,
        used_code=calls >= 1,
        code_calls=calls,
        response_tokens=trajectory.token_count,
    )


def group_accuracy(records: Sequence[RewardRecord]) -> float:
    if not records:
        raise ValueError("group_accuracy needs at least one record")
    return sum(r.reward for r in records) / len(records)


@dataclass(frozen=True)
class EvalSample:
    """One sampled response for a problem: its score plus its stated answer."""

    record: RewardRecord
    answer: Optional[Answer]


@dataclass(frozen=True)
class ProblemSamples:
    """All k samples for one problem; samples[0] is the designated greedy one."""

    problem_id: str
    gold: Answer
    samples: tuple[EvalSample, ...]


@dataclass(frozen=True)
class EvalMetrics:
    k: int
    pass_at_1: float
    avg_at_k: float
    maj_at_k: float
    max_at_k: float
    code_proportion: float
    code_in_correct: float
    code_in_correct_empty: bool
    code_count_avg: float
    response_length_avg: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "pass_at_1": self.pass_at_1,
            "avg_at_k": self.avg_at_k,
            "maj_at_k": self.maj_at_k,
            "max_at_k": self.max_at_k,
            "code_proportion": self.code_proportion,
            "code_in_correct": self.code_in_correct,
            "code_in_correct_empty": self.code_in_correct_empty,
            "code_count_avg": self.code_count_avg,
            "response_length_avg": self.response_length_avg,
        }


def majority_correct(gold: Answer, samples: Sequence[EvalSample]) -> bool:
    """Modal canonical answer equals gold; ties break to the lexicographically
    smallest canonical, so a tied gold only counts when it wins the break."""
    votes = Counter(s.answer.canonical for s in samples if s.answer is not None)
    if not votes:
        return False
    top = max(votes.values())
    modes = [canon for canon, n in votes.items() if n == top]
    return min(modes) == gold.canonical


def eval_metrics(groups: Sequence[ProblemSamples]) -> EvalMetrics:
    if not groups:
        raise ValueError("eval_metrics needs at least one problem")
    k = len(groups[0].samples)
    if k < 1:
        raise ValueError("need k >= 1 samples per problem")
    for g in groups:
        if len(g.samples) != k:
            raise ValueError(
                f"problem {g.problem_id!r} has {len(g.samples)} samples, expected {k}"
            )

    all_samples = [s for g in groups for s in g.samples]
    n = len(all_samples)
    correct = [s for s in all_samples if s.record.reward == 1]

    pass_at_1 = sum(g.samples[0].record.reward for g in groups) / len(groups)
    avg_at_k = len(correct) / n
    max_at_k = sum(
        1 for g in groups if any(s.record.reward == 1 for s in g.samples)
    ) / len(groups)
    maj_at_k = sum(1 for g in groups if majority_correct(g.gold, g.samples)) / len(groups)

    code_proportion = sum(1 for s in all_samples if s.record.used_code) / n
    if correct:
        code_in_correct = sum(1 for s in correct if s.record.used_code) / len(correct)
        empty = False
    else:
        code_in_correct, empty = 0.0, True
    code_count_avg = sum(s.record.code_calls for s in all_samples) / n
    response_length_avg = sum(s.record.response_tokens for s in all_samples) / n

    return EvalMetrics(
        k=k,
        pass_at_1=pass_at_1,
        avg_at_k=avg_at_k,
        maj_at_k=maj_at_k,
        max_at_k=max_at_k,
        code_proportion=code_proportion,
        code_in_correct=code_in_correct,
        code_in_correct_empty=empty,
        code_count_avg=code_count_avg,
        response_length_avg=response_length_avg,
    )

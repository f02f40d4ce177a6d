"""Tests for the interactive rollout engine: stop-token plumbing, the golden
scripted episodes, budget/notice semantics, fault paths, and randomized
episode invariants."""

from __future__ import annotations

import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.adversary import (
    RandomAdversary,
    assert_episode_invariants,
    run_adversarial_episode,
)
from tests.conftest import scripted, step
from tests.golden_scenarios import (
    SCENARIOS,
    check_expectations,
    replay,
)
from ztir.backends import (
    BackendCapabilities,
    BackendFailure,
    Generation,
    ScenarioMismatch,
    ScriptedBackend,
    load_scenario,
)
from ztir.model import (
    BudgetMode,
    Origin,
    Problem,
    RolloutConfig,
    SegmentKind,
    StopReason,
    trajectory_to_jsonl_line,
)
from ztir.rollout import (
    NOTICE_TEXT,
    ProtocolError,
    StopClass,
    classify_stop,
    extract_code,
    find_first_stop,
    format_feedback,
    run_rollout,
)
from ztir.sandbox.client import StubExecClient
from ztir.sandbox.types import ExecResult, ExecTransportError, Verdict

CFG = RolloutConfig()


def result_with(stdout: str = "", stderr: str = "", exit_status: int = 0) -> ExecResult:
    return ExecResult(
        stdout=stdout,
        stderr=stderr,
        exit_status=exit_status,
        duration_ms=3,
        truncated=False,
        verdict=Verdict.OK,
    )


class TestClassifyStop:
    @pytest.mark.parametrize(
        "literal,expected",
        [
            ("<eos>", StopClass.TERMINAL_EOS),
            ("```python", StopClass.CODE_OPEN),
            ("```", StopClass.CODE_CLOSE),
            ("\\boxed{", StopClass.TERMINAL_BOXED),
        ],
    )
    def test_mapping(self, literal, expected):
        event = classify_stop(literal, CFG)
        assert event.stop_class is expected
        assert event.matched_token == literal

    def test_unknown_literal_rejected(self):
        with pytest.raises(ProtocolError):
            classify_stop("</s>", CFG)

    def test_custom_fence_literals(self):
        cfg = RolloutConfig(
            eos_marker="<end>",
            code_open="<tool>",
            code_close="</tool>",
            stop_token_set=("<end>", "<tool>", "</tool>"),
        )
        assert classify_stop("<tool>", cfg).stop_class is StopClass.CODE_OPEN
        assert classify_stop("</tool>", cfg).stop_class is StopClass.CODE_CLOSE


class TestExtractCode:
    def test_plain_body(self):
        assert extract_code("\nprint(2+2)\n") == "print(2+2)"

    def test_fences_stripped(self):
        assert extract_code("```python\nx = 1\n```") == "x = 1"

    def test_interior_preserved_exactly(self):
        body = "\n\ndef f():\n\n    return 1\t\n\n"
        assert extract_code(body) == "def f():\n\n    return 1\t"

    def test_carriage_returns_trimmed(self):
        assert extract_code("\r\nx=1\r\n") == "x=1"

    def test_empty(self):
        assert extract_code("") == ""
        assert extract_code("\n\n") == ""

    def test_interior_spaces_survive(self):
        assert extract_code("\n  indented\n") == "  indented"


class TestFormatFeedback:
    def test_stdout_on_success(self):
        text = format_feedback(result_with(stdout="4\n"), CFG)
        assert text == "\n```output\n4\n```\n"

    def test_stderr_on_failure(self):
        res = result_with(stderr="ZeroDivisionError: division by zero\n", exit_status=1)
        assert format_feedback(res, CFG) == (
            "\n```output\nZeroDivisionError: division by zero\n```\n"
        )

    def test_exactly_one_trailing_newline_absorbed(self):
        assert format_feedback(result_with(stdout="4\n\n"), CFG) == (
            "\n```output\n4\n\n```\n"
        )

    def test_no_trailing_newline_ok(self):
        assert format_feedback(result_with(stdout="4"), CFG) == "\n```output\n4\n```\n"

    def test_empty_payload(self):
        assert format_feedback(result_with(), CFG) == "\n```output\n\n```\n"

    def test_truncation_marker_fits_limit(self):
        cfg = RolloutConfig(feedback_limit_chars=32)
        res = result_with(stdout="a" * 100 + "\n")
        text = format_feedback(res, cfg)
        payload = text[len("\n```output\n") : -len("\n```\n")]
        assert payload == "a" * 21 + "[truncated]"
        assert len(payload) == 32

    def test_limit_smaller_than_marker(self):
        cfg = RolloutConfig(feedback_limit_chars=5)
        text = format_feedback(result_with(stdout="abcdefgh"), cfg)
        assert "[truncated]" in text

    def test_at_limit_not_truncated(self):
        cfg = RolloutConfig(feedback_limit_chars=5)
        assert format_feedback(result_with(stdout="abcde\n"), cfg) == (
            "\n```output\nabcde\n```\n"
        )


class TestFindFirstStop:
    STOPS = ("<eos>", "```python", "```", "\\boxed{")

    def test_earliest_wins(self):
        assert find_first_stop("a \\boxed{ b ```python", self.STOPS) == (2, "\\boxed{")

    def test_tie_prefers_longest(self):
        assert find_first_stop("x ```python y", self.STOPS) == (2, "```python")

    def test_close_fence_alone(self):
        assert find_first_stop("x ``` y", self.STOPS) == (2, "```")

    def test_absent(self):
        assert find_first_stop("nothing here", self.STOPS) is None

    def test_empty_literals_ignored(self):
        assert find_first_stop("abc", ("", "b")) == (1, "b")

    @given(
        st.text(alphabet="`pyabc<>eos\\bxd{} \n", max_size=60),
        st.lists(
            st.sampled_from(["<eos>", "```python", "```", "\\boxed{", "}"]),
            min_size=1,
            max_size=5,
            unique=True,
        ),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_bruteforce(self, text, stops):
        hits = [
            (text.find(s), s) for s in stops if s and text.find(s) >= 0
        ]
        expected = min(hits, key=lambda h: (h[0], -len(h[1]))) if hits else None
        assert find_first_stop(text, stops) == expected


class TestGoldenScenarios:
    def test_at_least_twelve(self):
        assert len(SCENARIOS) >= 12

    @pytest.mark.parametrize("scenario", SCENARIOS, ids=lambda s: s.name)
    def test_structure_matches_hand_derivation(self, scenario):
        check_expectations(scenario)

    @pytest.mark.parametrize("scenario", SCENARIOS, ids=lambda s: s.name)
    def test_bytes_match_frozen_golden(self, scenario):
        steps = load_scenario(str(scenario.scenario_path()))
        traj = run_rollout(
            ScriptedBackend(steps),
            scenario.problem,
            StubExecClient(),
            scenario.config(),
        )
        produced = trajectory_to_jsonl_line(traj) + "\n"
        frozen = scenario.trajectory_path().read_text(encoding="utf-8")
        assert produced == frozen

    def test_full_set_replays_quickly(self):
        start = time.monotonic()
        for scenario in SCENARIOS:
            replay(scenario)
        assert time.monotonic() - start < 5.0


class TestBudgetAndNotice:
    def test_notice_text_exact_bytes(self):
        assert NOTICE_TEXT == (
            "Tool call count has been exhausted. "
            "You can no longer call the tool."
        )

    def test_code_open_removed_after_notice(self):
        # The scripted backend refuses stops outside the offered set, so a
        # post-notice attempt to open a fence proves the stop was withdrawn.
        backend = scripted(
            step("a ", "```python"),
            step("b ", "```python"),
        )
        cfg = RolloutConfig(max_tool_calls=0)
        with pytest.raises(ScenarioMismatch):
            run_rollout(backend, Problem("p", "Q\n", "0"), StubExecClient(), cfg)

    def test_close_fence_still_active_after_notice(self):
        backend = scripted(
            step("a ", "```python"),
            step("b ", "```"),
        )
        cfg = RolloutConfig(max_tool_calls=0)
        traj = run_rollout(backend, Problem("p", "Q\n", "0"), StubExecClient(), cfg)
        assert traj.stop_reason is StopReason.EOS
        assert [s.kind for s in traj.segments] == [
            SegmentKind.REASONING,
            SegmentKind.NOTICE,
            SegmentKind.REASONING,
        ]
        assert traj.segments[-1].text == "b ```"

    def test_token_ceiling_after_notice(self):
        backend = scripted(step("x", "```python", tokens=10))
        cfg = RolloutConfig(max_tool_calls=0, max_total_tokens=10)
        traj = run_rollout(backend, Problem("p", "Q\n", "0"), StubExecClient(), cfg)
        assert traj.stop_reason is StopReason.LENGTH_LIMIT
        assert [s.kind for s in traj.segments] == [
            SegmentKind.REASONING,
            SegmentKind.NOTICE,
        ]
        assert traj.segments[0].text == "x```python"
        assert traj.token_count == 10


class BoxedForever:
    """Opens a boxed answer then keeps the brace balance at one forever."""

    def __init__(self):
        self._opened = False

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=True, eos_marker="<eos>")

    def generate(self, context, stop_set, sampling=None) -> Generation:
        if not self._opened:
            self._opened = True
            return Generation(text="x ", stop="\\boxed{", token_count=3)
        return Generation(text="{a", stop="}", token_count=3)


class NoStopSupport:
    """Emits raw text with stop literals embedded; the engine must scan."""

    def __init__(self, script: list[str]):
        self._script = list(script)

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=False, eos_marker="<eos>")

    def generate(self, context, stop_set, sampling=None) -> Generation:
        text = self._script.pop(0)
        return Generation(text=text, stop=None, token_count=len(text) + 1)


class LeakyBackend:
    def __init__(self, text: str, stop: str | None):
        self._gen = Generation(text=text, stop=stop, token_count=4)

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=True, eos_marker="<eos>")

    def generate(self, context, stop_set, sampling=None) -> Generation:
        return self._gen


class FailingBackend:
    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=True, eos_marker="<eos>")

    def generate(self, context, stop_set, sampling=None) -> Generation:
        raise BackendFailure("socket closed")


class DeadExecutor:
    def execute(self, request):
        raise ExecTransportError("connection refused")


class TestFaultPaths:
    def test_unclosed_boxed_scan_hits_token_ceiling(self):
        cfg = RolloutConfig(max_total_tokens=60)
        traj = run_rollout(
            BoxedForever(), Problem("p", "Q\n", "0"), StubExecClient(), cfg
        )
        assert traj.stop_reason is StopReason.LENGTH_LIMIT
        assert len(traj.segments) == 1
        assert traj.segments[0].text.startswith("x \\boxed{")
        assert "{a}" in traj.segments[0].text
        assert traj.token_count <= 60 + 3

    def test_executor_transport_failure_becomes_tool_output(self):
        backend = scripted(
            step("Run ", "```python"),
            step("\nprint(1)\n", "```"),
            step("ok ", "\\boxed{"),
            step("1", "}"),
        )
        traj = run_rollout(
            backend, Problem("p", "Q\n", "1"), DeadExecutor(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.BOXED_ANSWER
        call = traj.tool_calls[0]
        assert call.result.verdict is Verdict.WORKER_CRASH
        assert call.result.exit_status == -1
        assert call.result.stderr.startswith("execution service unavailable")
        outputs = [s for s in traj.segments if s.kind is SegmentKind.TOOL_OUTPUT]
        assert len(outputs) == 1
        assert outputs[0].text == (
            "\n```output\nexecution service unavailable: "
            "connection refused\n```\n"
        )

    def test_scan_fallback_boxed(self):
        backend = NoStopSupport(["I think \\boxed{42} and more", "42} tail"])
        traj = run_rollout(
            backend, Problem("p", "Q\n", "42"), StubExecClient(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.BOXED_ANSWER
        assert len(traj.segments) == 1
        assert traj.segments[0].text == "I think \\boxed{42}"

    def test_scan_fallback_code_roundtrip(self):
        backend = NoStopSupport(
            [
                "Compute\n```python junk after open",
                "\nprint(2+2)\n``` trailing",
                "done",
            ]
        )
        traj = run_rollout(
            backend, Problem("p", "Q\n", "4"), StubExecClient(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.EOS
        kinds = [s.kind for s in traj.segments]
        assert kinds == [
            SegmentKind.REASONING,
            SegmentKind.CODE_BLOCK,
            SegmentKind.TOOL_OUTPUT,
            SegmentKind.REASONING,
        ]
        assert traj.tool_calls[0].code == "print(2+2)"
        assert traj.tool_calls[0].result.stdout == "4\n"
        assert traj.segments[-1].text == "done"

    def test_leaked_stop_literal_rejected(self):
        backend = LeakyBackend("see ```python inside", "<eos>")
        with pytest.raises(ProtocolError):
            run_rollout(
                backend, Problem("p", "Q\n", "0"), StubExecClient(), RolloutConfig()
            )

    def test_out_of_set_stop_rejected(self):
        backend = LeakyBackend("fine", "</s>")
        with pytest.raises(ProtocolError):
            run_rollout(
                backend, Problem("p", "Q\n", "0"), StubExecClient(), RolloutConfig()
            )

    def test_backend_failure_ends_with_backend_error(self):
        traj = run_rollout(
            FailingBackend(), Problem("p", "Q\n", "0"), StubExecClient(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.BACKEND_ERROR
        assert traj.segments == ()
        assert traj.token_count == 0


class TestAdversarialEpisodes:
    def test_invariants_hold_across_randomized_episodes(self):
        for seed in range(400):
            assert_episode_invariants(run_adversarial_episode(seed))

    def test_adversary_is_deterministic(self):
        a = run_adversarial_episode(123).trajectory
        b = run_adversarial_episode(123).trajectory
        assert trajectory_to_jsonl_line(a) == trajectory_to_jsonl_line(b)

    def test_every_stop_reason_is_reachable(self):
        seen = {
            run_adversarial_episode(seed).trajectory.stop_reason
            for seed in range(400)
        }
        assert StopReason.EOS in seen
        assert StopReason.BOXED_ANSWER in seen
        assert StopReason.BUDGET_EXHAUSTED in seen

    def test_adversary_respects_offered_stops(self):
        rng = random.Random(5)
        adversary = RandomAdversary(rng)
        for _ in range(50):
            gen = adversary.generate("ctx", ("<eos>", "```", "}"))
            assert gen.stop in (None, "```", "}")
            assert find_first_stop(gen.text, ("<eos>", "```python", "```", "\\boxed{", "}")) is None


class TestContextFidelity:
    def test_context_seen_by_backend_matches_rendered_prefix(self):
        # The scripted backend asserts context suffixes at every step, so a
        # full run with suffix checks is itself the fidelity proof.
        backend = scripted(
            step("Let me compute ", "```python"),
            step("\nprint(2+2)\n", "```", suffix="Let me compute ```python"),
            step("so ", "\\boxed{", suffix="```output\n4\n```\n"),
            step("4", "}", suffix="so \\boxed{"),
        )
        traj = run_rollout(
            backend, Problem("p", "Compute 2+2.\n", "4"), StubExecClient(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.BOXED_ANSWER

    def test_failure_inside_code_block_merges_reasoning(self):
        # Generation dies after the fence opened: the fence literal folds
        # back into the preceding free text as a single segment.
        class DiesInCode:
            def __init__(self):
                self.calls = 0

            @property
            def capabilities(self):
                return BackendCapabilities(
                    supports_stop_strings=True, eos_marker="<eos>"
                )

            def generate(self, context, stop_set, sampling=None):
                self.calls += 1
                if self.calls == 1:
                    return Generation(text="Try ", stop="```python", token_count=5)
                raise BackendFailure("gone")

        traj = run_rollout(
            DiesInCode(), Problem("p", "Q\n", "0"), StubExecClient(), RolloutConfig()
        )
        assert traj.stop_reason is StopReason.BACKEND_ERROR
        assert [(s.kind, s.text) for s in traj.segments] == [
            (SegmentKind.REASONING, "Try ```python")
        ]
        assert len(traj.tool_calls) == 0

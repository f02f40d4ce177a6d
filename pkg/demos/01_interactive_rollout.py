"""
Interactive tool-call rollout, step by step
===========================================

One episode against a scripted generation backend: the model "decides" to
write code, the orchestrator executes it in-process, feeds the output back
into the context, and generation resumes until a boxed answer arrives.
"""

from ztir.backends import ScenarioStep, ScriptedBackend
from ztir.model import Problem, RolloutConfig
from ztir.rollout import run_rollout
from ztir.sandbox.client import StubExecClient

# The script below is what a completion model would emit, chunk by chunk.
# Each step names the stop literal the backend reports when it pauses.
steps = [
    ScenarioStep("", "To count the primes below 50 I'll just sieve. ", "```python"),
    ScenarioStep(
        "",
        "\nprint(sum(all(n % d for d in range(2, n)) and n > 1 for n in range(50)))\n",
        "```",
    ),
    ScenarioStep("", "The sieve says ", "\\boxed{"),
    ScenarioStep("", "15", "}"),
]

problem = Problem(
    id="primes-below-50",
    prompt="How many primes are smaller than 50?\n",
    gold_answer="15",
)

trajectory = run_rollout(
    backend=ScriptedBackend(steps),
    problem=problem,
    env=StubExecClient(),
    config=RolloutConfig(max_tool_calls=4),
)

# Everything the policy and the environment contributed, in order.
print(f"stop reason : {trajectory.stop_reason.value}")
print(f"tool calls  : {trajectory.code_call_count()}")
print(f"tokens      : {trajectory.token_count}")
print()
for segment in trajectory.segments:
    print(f"--- {segment.origin.value}/{segment.kind.value} ---")
    print(segment.text)

# The execution record carries the exact payload and its captured streams.
call = trajectory.tool_calls[0]
print(f"call #{call.index}: exit {call.result.exit_status}, "
      f"stdout {call.result.stdout!r}")

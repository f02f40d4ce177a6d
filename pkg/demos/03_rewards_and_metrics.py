"""
Outcome rewards and k-sample evaluation metrics
===============================================

Score a batch of trajectories against gold answers, then aggregate the
per-problem sample groups into the full metric set: pass@1, avg@k, maj@k,
max@k, and the code-usage statistics.
"""

from ztir.verify import (
    Answer,
    EvalSample,
    ProblemSamples,
    RewardRecord,
    answers_equivalent,
    eval_metrics,
)

# Answer equivalence is mathematical, not textual: fractions, decimals, and
# formatting noise all normalize before comparison.
pairs = [("0.5", "1/2"), ("  42 ", "42.0"), ("3/4", "0.75"), ("7", "8")]
for left, right in pairs:
    same = answers_equivalent(Answer.of(left), Answer.of(right))
    print(f"{left!r:8s} == {right!r:6s} -> {same}")
print()


def sample(answer, gold, code_calls, tokens=120):
    correct = answer is not None and answers_equivalent(
        Answer.of(answer), Answer.of(gold)
    )
    record = RewardRecord(
        trajectory_id="t",
        reward=int(correct),
        used_code=code_calls > 0,
        code_calls=code_calls,
        response_tokens=tokens,
    )
    return EvalSample(record=record, answer=Answer.of(answer) if answer else None)


# Two problems, four samples each.  The first is solved by majority vote;
# the second only by its single code-using sample, so max@4 sees it but
# maj@4 does not.
groups = [
    ProblemSamples(
        problem_id="p1",
        gold=Answer.of("10"),
        samples=(
            sample("10", "10", 1),
            sample("10", "10", 1),
            sample("12", "10", 0),
            sample("10", "10", 2),
        ),
    ),
    ProblemSamples(
        problem_id="p2",
        gold=Answer.of("1/3"),
        samples=(
            sample("0.25", "1/3", 0),
            sample("2/6", "1/3", 1),
            sample(None, "1/3", 0),
            sample("0.25", "1/3", 0),
        ),
    ),
]

metrics = eval_metrics(groups).to_dict()
for key in sorted(metrics):
    print(f"{key:22s} {metrics[key]}")

"""
Rollout scheduling: synchronous vs async vs pipelined
=====================================================

A latency model of the training loop (generation, execution, training,
weight transfer) shows why decoupling rollout collection from optimization
pays: the pipelined scheduler overlaps everything the dependency graph
allows, and throughput follows the critical path instead of the sum.
"""

import time

from ztir.pipeline import Pipeline
from ztir.simulate import SimProfile, compare_modes

profile = SimProfile()  # gen 100 ms, exec 50 ms, 4 actors, queue depth 2
reports = compare_modes(profile, steps=50)

print("mode         steps/s   gen-util  exec-util")
for mode in ("sync", "basic_async", "pipelined"):
    r = reports[mode]
    print(f"{mode:12s} {r.steps_per_sec:7.3f}   {r.gen_utilization:8.2f} "
          f"{r.exec_utilization:10.2f}")
sync, pipelined = reports["sync"], reports["pipelined"]
print(f"\npipelined / sync speedup: "
      f"{pipelined.steps_per_sec / sync.steps_per_sec:.2f}x")

# The same shape with real threads: four actors produce rollout groups into
# bounded queues while the consumer drains.  Here the "rollout" is sleeping.
from ztir.buffer import ReplayBuffer, RewardedGroup  # noqa: E402
from ztir.model import Origin, Segment, SegmentKind, StopReason, Trajectory  # noqa: E402
from ztir.verify import RewardRecord  # noqa: E402

counter = iter(range(10**9))


def produce() -> RewardedGroup:
    time.sleep(0.02)
    pid = f"prompt-{next(counter)}"
    members = []
    for i in range(4):
        reward = i % 2
        traj = Trajectory(
            problem_id=pid,
            segments=(
                Segment(Origin.POLICY, SegmentKind.REASONING, f"\\boxed{{{reward}}}"),
            ),
            stop_reason=StopReason.BOXED_ANSWER,
            tool_calls=(),
            token_count=3,
        )
        record = RewardRecord(
            trajectory_id=f"{pid}#{i}", reward=reward, used_code=False,
            code_calls=0, response_tokens=3,
        )
        members.append((traj, record))
    return RewardedGroup.build(pid, members)


pipe = Pipeline([produce] * 4, ReplayBuffer(), queue_depth=2)
pipe.start()
collected = [pipe.collect_one(timeout_s=5.0) for _ in range(20)]
pipe.stop()
print(f"\nthreaded run: collected {sum(g is not None for g in collected)} "
      f"groups from {len(pipe.actors)} actors")
print(f"per-actor completions: {[a.snapshot()['completed'] for a in pipe.actors]}")
print(f"conservation: {pipe.conservation()}")

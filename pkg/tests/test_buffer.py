"""Group filtering rules, FIFO batching, underflow, and conservation."""

from __future__ import annotations

import json
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztir.buffer import (
    FilterDecision,
    ReplayBuffer,
    RewardedGroup,
    Underflow,
    filter_group,
)
from ztir.model import (
    Origin,
    RLHyperparams,
    Segment,
    SegmentKind,
    StopReason,
    Trajectory,
)
from ztir.verify import RewardRecord


def member(pid: str, reward: int, tid: str):
    traj = Trajectory(
        problem_id=pid,
        segments=(
            Segment(Origin.POLICY, SegmentKind.REASONING, f"\\boxed{{{reward}}}"),
        ),
        stop_reason=StopReason.BOXED_ANSWER,
        tool_calls=(),
        token_count=3,
    )
    rec = RewardRecord(
        trajectory_id=tid, reward=reward, used_code=False,
        code_calls=0, response_tokens=3,
    )
    return traj, rec


def group_with(pid: str, rewards: list[int]) -> RewardedGroup:
    return RewardedGroup.build(
        pid, [member(pid, r, f"{pid}#{i}") for i, r in enumerate(rewards)]
    )


class TestFilterRule:
    def test_drop_high_at_14_of_16(self):
        g = group_with("p", [1] * 14 + [0] * 2)
        assert g.accuracy == 0.875
        assert filter_group(g, 0.2, 0.8) is FilterDecision.DROP_HIGH

    def test_keep_interior(self):
        assert filter_group(group_with("p", [1, 0]), 0.2, 0.8) is FilterDecision.KEEP

    def test_drop_low_at_3_of_16(self):
        g = group_with("p", [1] * 3 + [0] * 13)
        assert g.accuracy == 0.1875
        assert filter_group(g, 0.2, 0.8) is FilterDecision.DROP_LOW

    def test_boundaries_keep(self):
        exactly_high = group_with("p", [1, 1, 1, 1, 0])  # 4/5 = 0.8
        exactly_low = group_with("p", [1, 0, 0, 0, 0])  # 1/5 = 0.2
        assert filter_group(exactly_high, 0.2, 0.8) is FilterDecision.KEEP
        assert filter_group(exactly_low, 0.2, 0.8) is FilterDecision.KEEP

    def test_extremes_dropped(self):
        assert filter_group(group_with("p", [1] * 16), 0.2, 0.8) is FilterDecision.DROP_HIGH
        assert filter_group(group_with("p", [0] * 16), 0.2, 0.8) is FilterDecision.DROP_LOW

    def test_exhaustive_over_random_groups(self):
        rng = random.Random(1)
        for _ in range(10_000):
            rewards = [rng.randint(0, 1) for _ in range(16)]
            g = group_with("p", rewards)
            acc = sum(rewards) / 16
            expected = (
                FilterDecision.DROP_HIGH
                if acc > 0.8
                else FilterDecision.DROP_LOW
                if acc < 0.2
                else FilterDecision.KEEP
            )
            assert filter_group(g, 0.2, 0.8) is expected

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=32), st.randoms())
    @settings(max_examples=200, deadline=None)
    def test_decision_is_permutation_invariant(self, rewards, rnd):
        base = filter_group(group_with("p", rewards), 0.2, 0.8)
        shuffled = list(rewards)
        rnd.shuffle(shuffled)
        assert filter_group(group_with("p", shuffled), 0.2, 0.8) is base


class TestRewardedGroup:
    def test_accuracy_is_mean_reward(self):
        assert group_with("p", [1, 0, 0, 1]).accuracy == 0.5

    def test_mixed_problem_ids_rejected(self):
        with pytest.raises(ValueError):
            RewardedGroup.build("p", [member("p", 1, "a"), member("q", 0, "b")])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            RewardedGroup.build("p", [])


def hp(batch: int = 16) -> RLHyperparams:
    return RLHyperparams(rollout_batch=batch)


class TestReplayBuffer:
    def test_fifo_first_batch_is_first_group(self):
        buf = ReplayBuffer(hp(16))
        g1 = group_with("a", [1] * 8 + [0] * 8)
        g2 = group_with("b", [0] * 8 + [1] * 8)
        assert buf.push_group(g1) is FilterDecision.KEEP
        assert buf.push_group(g2) is FilterDecision.KEEP
        batch = buf.next_batch(16)
        assert [rec.trajectory_id for _, rec in batch] == [
            f"a#{i}" for i in range(16)
        ]

    def test_dropped_groups_never_served(self):
        buf = ReplayBuffer(hp(4))
        buf.push_group(group_with("high", [1] * 16))
        assert buf.needs_refill()
        buf.push_group(group_with("keep", [1, 0, 1, 0]))
        batch = buf.next_batch(4)
        assert all(rec.trajectory_id.startswith("keep") for _, rec in batch)

    def test_drop_high_only_stream_keeps_needing_refill(self):
        buf = ReplayBuffer(hp(16))
        for i in range(5):
            assert buf.push_group(group_with(f"p{i}", [1] * 16)) is FilterDecision.DROP_HIGH
        assert buf.needs_refill()

    def test_one_full_batch_then_underflow(self):
        buf = ReplayBuffer(hp(128))
        for i in range(8):
            buf.push_group(group_with(f"p{i}", [1] * 8 + [0] * 8))
        assert buf.pending_count() == 128
        assert len(buf.next_batch(128)) == 128
        with pytest.raises(Underflow) as exc:
            buf.next_batch(128)
        assert exc.value.requested == 128
        assert exc.value.available == 0

    def test_conservation_over_random_stream(self):
        rng = random.Random(3)
        buf = ReplayBuffer(hp(8))
        for i in range(300):
            rewards = [rng.randint(0, 1) for _ in range(8)]
            buf.push_group(group_with(f"p{i}", rewards))
            assert buf.conserved()
            if not buf.needs_refill() and rng.random() < 0.5:
                buf.next_batch(8)
                assert buf.conserved()

    def test_decision_log_and_state_dump(self, tmp_path):
        buf = ReplayBuffer(hp(4))
        buf.push_group(group_with("hi", [1] * 16))
        buf.push_group(group_with("mid", [1, 0]))
        buf.push_group(group_with("lo", [0] * 16))
        path = tmp_path / "state.jsonl"
        buf.dump_state(str(path))
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["problem_id"] for r in rows] == ["hi", "mid", "lo"]
        assert [r["decision"] for r in rows] == ["DropHigh", "Keep", "DropLow"]
        assert rows[0]["accuracy"] == 1.0
        assert set(rows[0]) == {"problem_id", "accuracy", "decision"}

    def test_concurrent_producers_single_consumer(self):
        buf = ReplayBuffer(hp(8))
        pushed = 240

        def producer(start: int):
            for i in range(start, start + pushed // 3):
                buf.push_group(group_with(f"p{i}", [1, 0, 1, 0]))

        threads = [threading.Thread(target=producer, args=(k * 1000,)) for k in range(3)]
        for t in threads:
            t.start()
        served = 0
        while served < pushed * 4:
            try:
                served += len(buf.next_batch(8))
            except Underflow:
                pass
        for t in threads:
            t.join()
        assert served == pushed * 4
        assert buf.conserved()
        assert buf.pending_count() == 0

"""Tests for pipeline throughput claims (virtual-clock simulation) and the
threaded actor machinery (bounded queues, adaptive collection, conservation)."""

from __future__ import annotations

import threading
import time

import pytest

from tests.test_buffer import group_with
from ztir.backends import ScenarioStep, ScriptedBackend
from ztir.buffer import ReplayBuffer, RewardedGroup
from ztir.model import Problem, RLHyperparams, RolloutConfig
from ztir.pipeline import (
    ActorState,
    CollectShortfall,
    Pipeline,
    ProblemCycler,
    adaptive_sync_collect,
    make_group_producer,
    run_pipelined,
)
from ztir.sandbox.client import StubExecClient
from ztir.simulate import SIM_MODES, SimProfile, compare_modes, simulate

REFERENCE = SimProfile()  # gen 100ms, exec 50ms, 4 actors, depth 2


class TestSimulationThroughput:
    def test_reference_steady_state_rates(self):
        reports = compare_modes(REFERENCE, steps=50)
        # sync serializes submit + rollout + retrieve + train:
        # 15 + 150 + 15 + 60 = 240 ms/step.
        assert reports["sync"].steps_per_sec == pytest.approx(1000 / 240, rel=1e-3)
        # basic_async still serializes retrieve + train + submit = 90 ms.
        assert reports["basic_async"].steps_per_sec == pytest.approx(
            1000 / 90, rel=1e-3
        )
        # pipelined overlaps both transfers with the 60 ms train step.
        assert reports["pipelined"].steps_per_sec == pytest.approx(
            1000 / 60, rel=1e-3
        )

    def test_speedup_ratios(self):
        reports = compare_modes(REFERENCE, steps=50)
        sync = reports["sync"].steps_per_sec
        async_ = reports["basic_async"].steps_per_sec
        pipe = reports["pipelined"].steps_per_sec
        assert pipe / sync >= 1.5
        assert pipe / async_ >= 1.1
        assert pipe / sync == pytest.approx(4.0, rel=1e-3)
        assert pipe / async_ == pytest.approx(1.5, rel=1e-3)

    def test_deterministic_with_jitter(self):
        profile = SimProfile(
            gen_latency_ms={"mean": 100, "jitter": 30},
            exec_latency_ms={"mean": 50, "jitter": 20},
            seed=5,
        )
        for mode in SIM_MODES:
            a = simulate(profile, mode, steps=40)
            b = simulate(profile, mode, steps=40)
            assert a.to_dict() == b.to_dict()
            assert a.trace == b.trace

    def test_seed_changes_jittered_trace(self):
        base = dict(
            gen_latency_ms={"mean": 100, "jitter": 30},
            exec_latency_ms={"mean": 50, "jitter": 20},
        )
        a = simulate(SimProfile(seed=5, **base), "pipelined", steps=40)
        b = simulate(SimProfile(seed=6, **base), "pipelined", steps=40)
        assert a.trace != b.trace

    def test_depth_zero_async_collapses_to_sync(self):
        profile = SimProfile(queue_depth=0)
        sync = simulate(profile, "sync", steps=50).steps_per_sec
        async_ = simulate(profile, "basic_async", steps=50).steps_per_sec
        assert async_ == pytest.approx(sync, rel=0.05)

    def test_kill_actor_conserves_groups(self):
        report = simulate(
            REFERENCE, "pipelined", steps=50, kill_actor_at=(500.0, 0)
        )
        assert report.steps == 50
        assert report.groups_submitted == (
            report.groups_completed + report.groups_failed + report.groups_in_flight
        )
        full = simulate(REFERENCE, "pipelined", steps=50)
        assert report.steps_per_sec <= full.steps_per_sec * 1.001

    def test_report_dict_schema(self):
        body = simulate(REFERENCE, "sync", steps=10).to_dict()
        assert set(body) == {
            "mode", "steps", "wall_ms", "steps_per_sec",
            "gen_utilization", "exec_utilization",
        }
        assert body["mode"] == "sync"
        assert body["steps"] == 10

    def test_utilizations_are_fractions(self):
        for mode in SIM_MODES:
            report = simulate(REFERENCE, mode, steps=30)
            assert 0.0 <= report.gen_utilization <= 1.0
            assert 0.0 <= report.exec_utilization <= 1.0

    def test_async_keeps_generators_busier(self):
        reports = compare_modes(REFERENCE, steps=50)
        assert (
            reports["pipelined"].gen_utilization
            > reports["sync"].gen_utilization
        )

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError):
            simulate(REFERENCE, "turbo", steps=10)

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            SimProfile(actors=0)
        with pytest.raises(ValueError):
            SimProfile(queue_depth=-1)

    def test_profile_json_round_trip(self, tmp_path):
        profile = SimProfile(
            gen_latency_ms={"mean": 80, "jitter": 10}, actors=3, seed=9
        )
        path = tmp_path / "profile.json"
        profile.to_json(str(path))
        assert SimProfile.from_json(str(path)) == profile


def hp(batch: int) -> RLHyperparams:
    return RLHyperparams(rollout_batch=batch)


def counting_producer(prefix: str, rewards=None, delay_s: float = 0.0):
    """Groups named {prefix}{n} in production order; default mid accuracy."""
    rewards = rewards if rewards is not None else [1, 1, 0, 0]
    lock = threading.Lock()
    counter = {"n": 0}

    def produce() -> RewardedGroup:
        with lock:
            n = counter["n"]
            counter["n"] += 1
        if delay_s:
            time.sleep(delay_s)
        return group_with(f"{prefix}{n}", list(rewards))

    return produce


class TestActorState:
    def test_requires_capacity(self):
        with pytest.raises(ValueError):
            ActorState(actor_id=0, queue_capacity=0)

    def test_snapshot_keys(self):
        snap = ActorState(actor_id=3, queue_capacity=2).snapshot()
        assert set(snap) == {
            "actor_id", "submitted", "completed", "failed",
            "in_flight", "queued", "alive",
        }


class TestThreadedPipeline:
    def test_prefill_fills_bounded_queues(self):
        pipe = Pipeline(
            [counting_producer("a"), counting_producer("b")],
            ReplayBuffer(hp(8)),
            queue_depth=2,
        ).start()
        try:
            for state in pipe.actors:
                assert state.snapshot()["queued"] == 2
        finally:
            pipe.stop()

    def test_queues_never_exceed_capacity(self):
        pipe = Pipeline(
            [counting_producer("a"), counting_producer("b")],
            ReplayBuffer(hp(8)),
            queue_depth=2,
        ).start()
        try:
            deadline = time.monotonic() + 0.3
            while time.monotonic() < deadline:
                for state in pipe.actors:
                    snap = state.snapshot()
                    assert snap["queued"] <= 2
                    assert snap["in_flight"] <= 1
                pipe.collect_one(timeout_s=0.01)
                time.sleep(0.005)
        finally:
            pipe.stop()
        assert pipe.conservation()["balanced"]

    def test_single_actor_preserves_fifo_order(self):
        pipe = Pipeline(
            [counting_producer("p")], ReplayBuffer(hp(4)), queue_depth=3
        ).start()
        try:
            seen = [pipe.collect_one(timeout_s=2.0).problem_id for _ in range(6)]
        finally:
            pipe.stop()
        assert seen == [f"p{i}" for i in range(6)]

    def test_conservation_after_stop(self):
        pipe = Pipeline(
            [counting_producer("a"), counting_producer("b"), counting_producer("c")],
            ReplayBuffer(hp(8)),
            queue_depth=2,
        ).start()
        for _ in range(5):
            pipe.collect_one(timeout_s=1.0)
        pipe.stop()
        totals = pipe.conservation()
        assert totals["balanced"], totals
        assert totals["completed"] >= 5

    def test_kill_actor_marks_work_failed_not_lost(self):
        pipe = Pipeline(
            [counting_producer("a", delay_s=0.02), counting_producer("b", delay_s=0.02)],
            ReplayBuffer(hp(8)),
            queue_depth=1,
        ).start()
        try:
            pipe.kill_actor(0)
            time.sleep(0.3)
            assert pipe.alive_count() <= 1
        finally:
            pipe.stop()
        totals = pipe.conservation()
        assert totals["balanced"], totals

    def test_retries_then_succeeds(self):
        attempts = {"n": 0}
        inner = counting_producer("r")

        def flaky() -> RewardedGroup:
            attempts["n"] += 1
            if attempts["n"] <= 2:
                raise RuntimeError("transient rollout failure")
            return inner()

        pipe = Pipeline([flaky], ReplayBuffer(hp(4)), queue_depth=1, max_retries=3)
        pipe.start()
        try:
            group = pipe.collect_one(timeout_s=2.0)
            assert group is not None
        finally:
            pipe.stop()
        totals = pipe.conservation()
        assert totals["failed"] == 0
        assert totals["completed"] >= 1
        assert attempts["n"] >= 3

    def test_exhausted_retries_count_as_failed(self):
        calls = {"n": 0}
        inner = counting_producer("f")

        def first_group_doomed() -> RewardedGroup:
            calls["n"] += 1
            if calls["n"] <= 2:  # max_retries=1 means 2 attempts
                raise RuntimeError("permanent failure")
            return inner()

        pipe = Pipeline(
            [first_group_doomed], ReplayBuffer(hp(4)), queue_depth=1, max_retries=1
        )
        pipe.start()
        try:
            group = pipe.collect_one(timeout_s=2.0)
            assert group is not None  # the actor moved on after the failure
        finally:
            pipe.stop()
        totals = pipe.conservation()
        assert totals["failed"] >= 1
        assert totals["balanced"]


class TestAdaptiveCollect:
    def test_noop_when_buffer_already_serves(self):
        buffer = ReplayBuffer(hp(4))
        buffer.push_group(group_with("pre", [1, 1, 0, 0]))
        pipe = Pipeline([counting_producer("a")], buffer, queue_depth=1).start()
        try:
            assert adaptive_sync_collect(buffer, pipe, batch_size=4) == []
        finally:
            pipe.stop()

    def test_collects_exactly_enough_groups(self):
        buffer = ReplayBuffer(hp(8))
        pipe = Pipeline(
            [counting_producer("a"), counting_producer("b")], buffer, queue_depth=2
        ).start()
        try:
            collected = adaptive_sync_collect(buffer, pipe, batch_size=8)
        finally:
            pipe.stop()
        assert len(collected) == 2  # two 4-member groups fill an 8-member batch
        assert buffer.pending_count() == 8
        assert len(buffer.next_batch(8)) == 8

    def test_deadline_shortfall(self):
        buffer = ReplayBuffer(hp(8))
        pipe = Pipeline(
            [counting_producer("slow", delay_s=30.0)],
            buffer,
            queue_depth=1,
        )
        pipe.start(prefill=False)
        try:
            with pytest.raises(CollectShortfall) as info:
                adaptive_sync_collect(buffer, pipe, batch_size=8, deadline_s=0.3)
            assert info.value.collected == 0
            assert info.value.still_needed == 8
        finally:
            pipe.stop()

    def test_dead_actors_shortfall(self):
        buffer = ReplayBuffer(hp(4))
        pipe = Pipeline([counting_producer("a")], buffer, queue_depth=1).start()
        pipe.stop()  # actors exit; drain whatever was queued
        while pipe.collect_one(timeout_s=0.05) is not None:
            pass
        assert pipe.alive_count() == 0
        with pytest.raises(CollectShortfall):
            adaptive_sync_collect(buffer, pipe, batch_size=4, deadline_s=5.0)

    def test_partial_progress_reported_in_shortfall(self):
        buffer = ReplayBuffer(hp(12))
        produced = counting_producer("a")
        once = {"done": False}

        def one_then_slow() -> RewardedGroup:
            if not once["done"]:
                once["done"] = True
                return produced()
            time.sleep(30.0)
            return produced()

        pipe = Pipeline([one_then_slow], buffer, queue_depth=1)
        pipe.start(prefill=False)
        try:
            with pytest.raises(CollectShortfall) as info:
                adaptive_sync_collect(buffer, pipe, batch_size=12, deadline_s=0.5)
        finally:
            pipe.stop()
        assert info.value.collected == 1
        assert info.value.still_needed == 8  # 12 wanted, 4 members arrived


class TestRunPipelined:
    def test_report_and_training_batches(self):
        buffer = ReplayBuffer(hp(4))
        pipe = Pipeline(
            [counting_producer("a"), counting_producer("b")], buffer, queue_depth=2
        ).start()
        batches = []
        try:
            report = run_pipelined(
                pipe, steps=5, batch_size=4, train_fn=batches.append
            )
        finally:
            pipe.stop()
        assert report.steps == 5
        assert len(batches) == 5
        assert all(len(batch) == 4 for batch in batches)
        assert report.groups_consumed == 5
        assert report.steps_per_sec > 0
        assert set(report.to_dict()) == {
            "steps", "wall_ms", "steps_per_sec", "collect_ms",
            "train_ms", "groups_consumed",
        }


class TestProblemCycler:
    def test_round_robin_order(self):
        problems = [Problem(f"q{i}", f"Q{i}\n", str(i)) for i in range(3)]
        cycler = ProblemCycler(problems)
        ids = [cycler().id for _ in range(7)]
        assert ids == ["q0", "q1", "q2", "q0", "q1", "q2", "q0"]

    def test_thread_safety_distributes_evenly(self):
        problems = [Problem(f"q{i}", f"Q{i}\n", str(i)) for i in range(3)]
        cycler = ProblemCycler(problems)
        seen: list[str] = []
        lock = threading.Lock()

        def worker():
            for _ in range(150):
                problem = cycler()
                with lock:
                    seen.append(problem.id)

        threads = [threading.Thread(target=worker) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(seen) == 300
        for i in range(3):
            assert seen.count(f"q{i}") == 100

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            ProblemCycler([])


class TestMakeGroupProducer:
    def test_produces_scored_group(self):
        problem = Problem("m1", "Compute 2+2.\n", "4")

        def factory(p: Problem) -> ScriptedBackend:
            return ScriptedBackend(
                [
                    ScenarioStep("", "The answer is ", "\\boxed{"),
                    ScenarioStep("", p.gold_answer, "}"),
                ]
            )

        produce = make_group_producer(
            ProblemCycler([problem]),
            factory,
            StubExecClient(),
            RolloutConfig(),
            samples_per_prompt=4,
        )
        group = produce()
        assert group.problem_id == "m1"
        assert len(group.members) == 4
        assert group.accuracy == 1.0
        ids = [record.trajectory_id for _, record in group.members]
        assert ids == ["m1#0", "m1#1", "m1#2", "m1#3"]
